//! Label spaces: the 11 annotated categories and the 9-channel working space
//! (background plus eight part classes; skin and hair fold into background).

pub const NUM_CATEGORIES: usize = 11;
pub const NUM_CLASSES: usize = 9;
pub const NUM_PARTS: usize = 6;

pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] = [
    "background", "skin", "l-brow", "r-brow", "l-eye", "r-eye", "nose", "u-lip", "i-mouth", "l-lip", "hair",
];

pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["background", "l-brow", "r-brow", "l-eye", "r-eye", "nose", "u-lip", "i-mouth", "l-lip"];

pub const BACKGROUND: u8 = 0;

/// Working class of an annotated category.
pub fn category_to_class(cat: u8) -> u8 {
    match cat {
        2..=9 => cat - 1,
        _ => BACKGROUND,
    }
}

/// The six cropped parts, in theta order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Part {
    LeftBrow,
    RightBrow,
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

/// Parts that share one fine network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartKind {
    Brow,
    Eye,
    Nose,
    Mouth,
}

impl Part {
    pub const ALL: [Part; NUM_PARTS] = [
        Part::LeftBrow,
        Part::RightBrow,
        Part::LeftEye,
        Part::RightEye,
        Part::Nose,
        Part::Mouth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Working classes covered by the part window.
    pub fn classes(self) -> &'static [u8] {
        match self {
            Part::LeftBrow => &[1],
            Part::RightBrow => &[2],
            Part::LeftEye => &[3],
            Part::RightEye => &[4],
            Part::Nose => &[5],
            Part::Mouth => &[6, 7, 8],
        }
    }

    pub fn kind(self) -> PartKind {
        match self {
            Part::LeftBrow | Part::RightBrow => PartKind::Brow,
            Part::LeftEye | Part::RightEye => PartKind::Eye,
            Part::Nose => PartKind::Nose,
            Part::Mouth => PartKind::Mouth,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::LeftBrow => "l-brow",
            Part::RightBrow => "r-brow",
            Part::LeftEye => "l-eye",
            Part::RightEye => "r-eye",
            Part::Nose => "nose",
            Part::Mouth => "mouth",
        }
    }

    pub fn parse(s: &str) -> Option<Part> {
        Part::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl PartKind {
    pub const ALL: [PartKind; 4] = [PartKind::Brow, PartKind::Eye, PartKind::Nose, PartKind::Mouth];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Fine-net output channels: background plus the part's classes.
    pub fn channels(self) -> usize {
        match self {
            PartKind::Mouth => 4,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PartKind::Brow => "brow",
            PartKind::Eye => "eye",
            PartKind::Nose => "nose",
            PartKind::Mouth => "mouth",
        }
    }

    pub fn parts(self) -> Vec<Part> {
        Part::ALL.into_iter().filter(|p| p.kind() == self).collect()
    }
}
