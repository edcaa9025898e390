use std::cmp::Ordering;

/// Traffic classes, highest priority first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrafficClass {
    /// Activations and activation gradients: they block the next layer.
    Activation,
    /// Weight gradients, keyed by layer id (layer 0 first).
    WeightGradient,
    Bulk,
}

/// Total order over requests: class, then wait-promotion, then key, then
/// submission sequence. Smaller compares as more urgent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Priority {
    pub class: TrafficClass,
    pub key: u64,
    pub seq: u64,
    /// Set when a waiter needs the result now; moves the request to the
    /// front of its class.
    pub promoted: bool,
}

impl Priority {
    pub fn new(class: TrafficClass, key: u64) -> Self {
        Priority {
            class,
            key,
            seq: 0,
            promoted: false,
        }
    }

    pub fn activation(layer: usize) -> Self {
        Priority::new(TrafficClass::Activation, layer as u64)
    }

    pub fn weight_gradient(layer: usize) -> Self {
        Priority::new(TrafficClass::WeightGradient, layer as u64)
    }

    pub fn bulk() -> Self {
        Priority::new(TrafficClass::Bulk, 0)
    }

    pub fn with_seq(self, seq: u64) -> Self {
        Priority { seq, ..self }
    }

    /// Sort key under a scheduling policy. With prioritization disabled only
    /// the submission order counts (plain FIFO).
    pub fn sort_key(&self, prioritize: bool) -> PriorityKey {
        if prioritize {
            PriorityKey(self.class as u8, u8::from(!self.promoted), self.key, self.seq)
        } else {
            PriorityKey(0, 0, 0, self.seq)
        }
    }

    /// True if `self` must go before `other` under full prioritization.
    pub fn outranks(&self, other: &Priority) -> bool {
        self < other
    }
}

impl PartialOrd for Priority {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Priority {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key(true).cmp(&other.sort_key(true))
    }
}

/// Comparable form of a [`Priority`]; smaller is more urgent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PriorityKey(pub u8, pub u8, pub u64, pub u64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_class_then_key_then_seq() {
        let act = Priority::activation(40).with_seq(9);
        let w0 = Priority::weight_gradient(0).with_seq(5);
        let w12 = Priority::weight_gradient(12).with_seq(1);
        let bulk = Priority::bulk().with_seq(0);
        assert!(act.outranks(&w0));
        assert!(w0.outranks(&w12));
        assert!(w12.outranks(&bulk));
        let a = Priority::weight_gradient(3).with_seq(1);
        let b = Priority::weight_gradient(3).with_seq(2);
        assert!(a.outranks(&b));
        let mut promoted = Priority::weight_gradient(12).with_seq(1);
        promoted.promoted = true;
        assert!(promoted.outranks(&w0));
        assert!(act.outranks(&promoted));
    }

    #[test]
    fn fifo_policy_ignores_class() {
        let act = Priority::activation(0).with_seq(2);
        let bulk = Priority::bulk().with_seq(1);
        assert!(bulk.sort_key(false) < act.sort_key(false));
        assert!(act.sort_key(true) < bulk.sort_key(true));
    }
}
