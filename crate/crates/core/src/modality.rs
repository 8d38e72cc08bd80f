use std::fmt;
use std::str::FromStr;

/// One of the three biological sequence modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Dna,
    Rna,
    Protein,
}

impl Modality {
    /// Fixed processing and concatenation order.
    pub const ALL: [Modality; 3] = [Modality::Dna, Modality::Rna, Modality::Protein];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Dna => "dna",
            Modality::Rna => "rna",
            Modality::Protein => "protein",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Dna => 0,
            Modality::Rna => 1,
            Modality::Protein => 2,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dna" => Ok(Modality::Dna),
            "rna" => Ok(Modality::Rna),
            "protein" | "prot" => Ok(Modality::Protein),
            other => Err(format!("unknown modality '{other}'")),
        }
    }
}

/// A subset of modalities, e.g. the inputs enabled for one ablation condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ModalitySet {
    bits: u8,
}

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet { bits: 0 };
    pub const ALL: ModalitySet = ModalitySet { bits: 0b111 };

    pub fn of(modalities: &[Modality]) -> Self {
        let mut s = Self::EMPTY;
        for &m in modalities {
            s.insert(m);
        }
        s
    }

    pub fn insert(&mut self, m: Modality) {
        self.bits |= 1 << m.index();
    }

    pub fn remove(&mut self, m: Modality) {
        self.bits &= !(1 << m.index());
    }

    pub fn contains(self, m: Modality) -> bool {
        self.bits & (1 << m.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.bits == 0
    }

    pub fn len(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Modality::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = String;

    /// Parses `dna+rna`, `dna,rna,protein`, or `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let mut set = Self::EMPTY;
        for part in s.split(['+', ',']).filter(|p| !p.trim().is_empty()) {
            set.insert(part.parse()?);
        }
        if set.is_empty() {
            return Err("empty modality set".into());
        }
        Ok(set)
    }
}
