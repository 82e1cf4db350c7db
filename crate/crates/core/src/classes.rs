//! Semantic class taxonomy.

/// Occupancy classes in label order; label 0 is free space.
pub const CLASS_NAMES: [&str; 17] = [
    "free",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

pub const NUM_CLASSES: usize = CLASS_NAMES.len();

pub const FREE: u8 = 0;
pub const DRIVEABLE_SURFACE: u8 = 11;

/// Detection classes are the dynamic objects, labels `1..=10`.
pub const NUM_DET_CLASSES: usize = 10;

/// Detection index of an occupancy label, if it is a detectable object.
pub fn det_index(label: u8) -> Option<usize> {
    (1..=NUM_DET_CLASSES as u8).contains(&label).then(|| label as usize - 1)
}

pub fn det_label(index: usize) -> u8 {
    assert!(index < NUM_DET_CLASSES, "detection class {index}");
    index as u8 + 1
}

/// Fixed render color per class.
pub const PALETTE: [[u8; 3]; 17] = [
    [0, 0, 0],
    [255, 120, 50],
    [255, 192, 203],
    [255, 255, 0],
    [0, 150, 245],
    [0, 255, 255],
    [200, 180, 0],
    [255, 0, 0],
    [255, 240, 150],
    [135, 60, 0],
    [160, 32, 240],
    [255, 0, 255],
    [139, 137, 137],
    [75, 0, 75],
    [150, 240, 80],
    [230, 230, 250],
    [0, 175, 0],
];

/// Sky / background color for rays that hit nothing.
pub const BACKGROUND: [u8; 3] = [40, 40, 60];
