use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Class ids, names and display colors. Id 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPalette {
    entries: Vec<PaletteEntry>,
}

const TOOTH_POSITIONS: [&str; 8] = [
    "central",
    "lateral",
    "canine",
    "first premolar",
    "second premolar",
    "first molar",
    "second molar",
    "third molar",
];

const CONDITIONS: [&str; 15] = [
    "pulp chamber",
    "restoration",
    "endodontics",
    "crown",
    "decay",
    "pin",
    "composite",
    "bridge",
    "pulpitis",
    "orthodontics",
    "radicular cyst",
    "periapical cyst",
    "cyst",
    "implant",
    "bone graft material",
];

/// Evenly spaced hues at fixed saturation and value.
fn color_for(i: usize, n: usize) -> [u8; 3] {
    let h = (i as f64 * 360.0 / n as f64) % 360.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let q = |u: f64| ((u + m) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

impl ClassPalette {
    pub fn new(mut entries: Vec<PaletteEntry>) -> Result<Self, DataError> {
        entries.sort_by_key(|e| e.id);
        if entries.is_empty() {
            return Err(DataError::Palette("palette is empty".into()));
        }
        if entries.len() > 256 {
            return Err(DataError::Palette("more than 256 classes do not fit an 8-bit mask".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(DataError::Palette(format!("ids must be unique and contiguous from 0; found {} at position {i}", e.id)));
            }
        }
        Ok(Self { entries })
    }

    /// Background plus `names` as foreground classes, with generated colors.
    pub fn from_names(names: &[&str]) -> Self {
        let n = names.len();
        let mut entries = vec![PaletteEntry { id: 0, name: "background".into(), color: [0, 0, 0] }];
        entries.extend(names.iter().enumerate().map(|(i, name)| PaletteEntry {
            id: (i + 1) as u8,
            name: (*name).to_string(),
            color: color_for(i, n),
        }));
        Self { entries }
    }

    /// Background plus 33 foreground classes: sixteen tooth positions, a root
    /// class, fifteen conditions and one catch-all tooth class.
    pub fn dental() -> Self {
        let mut names: Vec<String> = Vec::with_capacity(33);
        for jaw in ["upper", "lower"] {
            names.extend(TOOTH_POSITIONS.iter().map(|p| format!("{jaw} {p}")));
        }
        names.push("root".into());
        names.extend(CONDITIONS.iter().map(|c| c.to_string()));
        names.push("unspecified tooth".into());
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        Self::from_names(&refs)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let entries: Vec<PaletteEntry> = serde_json::from_str(text).map_err(|e| DataError::Palette(e.to_string()))?;
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("palette serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()).map_err(|e| DataError::io(path, e))
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    /// Total number of ids including background.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_foreground(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.entries.len()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.entries.get(id as usize).map(|e| e.name.as_str())
    }

    pub fn color(&self, id: u8) -> [u8; 3] {
        self.entries.get(id as usize).map_or([0, 0, 0], |e| e.color)
    }
}
