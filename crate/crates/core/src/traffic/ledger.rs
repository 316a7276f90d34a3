use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Read,
    Write,
}

/// Bytes moved between global memory and a kernel for one named tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub tensor: String,
    pub direction: Direction,
    pub bytes: u64,
}

/// Global-memory traffic of one kernel launch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub name: String,
    pub transfers: Vec<Transfer>,
}

impl KernelRecord {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            transfers: Vec::new(),
        }
    }

    /// Adds `bytes` to the entry for `(tensor, direction)`, creating it if
    /// needed. Repeated calls accumulate, so per-tile recording in any order
    /// yields the same record.
    pub fn add(&mut self, tensor: &str, direction: Direction, bytes: u64) -> &mut Self {
        match self
            .transfers
            .iter_mut()
            .find(|t| t.tensor == tensor && t.direction == direction)
        {
            Some(t) => t.bytes += bytes,
            None => self.transfers.push(Transfer {
                tensor: tensor.to_string(),
                direction,
                bytes,
            }),
        }
        self
    }

    pub fn read(&mut self, tensor: &str, bytes: u64) -> &mut Self {
        self.add(tensor, Direction::Read, bytes)
    }

    pub fn write(&mut self, tensor: &str, bytes: u64) -> &mut Self {
        self.add(tensor, Direction::Write, bytes)
    }

    /// Folds another record's transfers into this one.
    pub fn merge(&mut self, other: &KernelRecord) {
        for t in &other.transfers {
            self.add(&t.tensor, t.direction, t.bytes);
        }
    }

    pub fn read_bytes(&self) -> u64 {
        self.sum(Direction::Read)
    }

    pub fn write_bytes(&self) -> u64 {
        self.sum(Direction::Write)
    }

    pub fn total_bytes(&self) -> u64 {
        self.read_bytes() + self.write_bytes()
    }

    /// Bytes recorded for one tensor in one direction (0 when absent).
    pub fn bytes(&self, tensor: &str, direction: Direction) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.tensor == tensor && t.direction == direction)
            .map(|t| t.bytes)
            .sum()
    }

    fn sum(&self, direction: Direction) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.direction == direction)
            .map(|t| t.bytes)
            .sum()
    }

    /// Same transfers regardless of the order they were recorded in.
    pub fn same_traffic(&self, other: &KernelRecord) -> bool {
        let key = |r: &KernelRecord| {
            let mut v: Vec<_> = r
                .transfers
                .iter()
                .filter(|t| t.bytes > 0)
                .map(|t| (t.tensor.clone(), t.direction == Direction::Write, t.bytes))
                .collect();
            v.sort();
            v
        };
        self.name == other.name && key(self) == key(other)
    }
}

/// Per-kernel traffic of a sequence of launches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficLedger {
    records: Vec<KernelRecord>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<KernelRecord>) -> Self {
        Self { records }
    }

    pub fn push(&mut self, record: KernelRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: TrafficLedger) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[KernelRecord] {
        &self.records
    }

    pub fn record(&self, name: &str) -> Option<&KernelRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn launches(&self) -> usize {
        self.records.len()
    }

    pub fn read_bytes(&self) -> u64 {
        self.records.iter().map(KernelRecord::read_bytes).sum()
    }

    pub fn write_bytes(&self) -> u64 {
        self.records.iter().map(KernelRecord::write_bytes).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.read_bytes() + self.write_bytes()
    }

    pub fn same_traffic(&self, other: &TrafficLedger) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_traffic(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_accumulates_per_tensor() {
        let mut r = KernelRecord::new("k");
        r.read("A", 10).read("A", 6).write("D", 4);
        assert_eq!(r.transfers.len(), 2);
        assert_eq!(r.bytes("A", Direction::Read), 16);
        assert_eq!(r.read_bytes(), 16);
        assert_eq!(r.total_bytes(), 20);
    }

    #[test]
    fn totals_are_sums_of_records() {
        let mut l = TrafficLedger::new();
        let mut a = KernelRecord::new("a");
        a.read("x", 3).write("y", 5);
        let mut b = KernelRecord::new("b");
        b.read("y", 5).write("z", 7);
        l.push(a);
        l.push(b);
        assert_eq!(l.launches(), 2);
        assert_eq!(l.read_bytes(), 8);
        assert_eq!(l.write_bytes(), 12);
        assert_eq!(l.total_bytes(), 20);
        assert!(TrafficLedger::new().total_bytes() == 0);
    }

    #[test]
    fn same_traffic_ignores_order() {
        let mut a = KernelRecord::new("k");
        a.read("A", 1).read("B", 2);
        let mut b = KernelRecord::new("k");
        b.read("B", 2).read("A", 1);
        assert!(a.same_traffic(&b));
        b.read("A", 1);
        assert!(!a.same_traffic(&b));
    }
}
