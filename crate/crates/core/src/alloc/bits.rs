use std::ops::Range;

/// Fixed-size occupancy bitvector, one bit per page slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bits {
    words: Vec<u64>,
    len: u64,
}

fn span(r: &Range<u64>) -> (usize, usize, u64, u64) {
    let first = (r.start / 64) as usize;
    let last = ((r.end - 1) / 64) as usize;
    let head = !0u64 << (r.start % 64);
    let tail = !0u64 >> (63 - (r.end - 1) % 64);
    (first, last, head, tail)
}

impl Bits {
    pub fn new(len: u64) -> Self {
        Bits {
            words: vec![0; len.div_ceil(64) as usize],
            len,
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn byte_len(&self) -> u64 {
        self.len.div_ceil(8)
    }

    pub fn get(&self, i: u64) -> bool {
        self.words[(i / 64) as usize] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: u64) {
        self.words[(i / 64) as usize] |= 1 << (i % 64);
    }

    pub fn clear(&mut self, i: u64) {
        self.words[(i / 64) as usize] &= !(1 << (i % 64));
    }

    pub fn toggle(&mut self, i: u64) {
        self.words[(i / 64) as usize] ^= 1 << (i % 64);
    }

    fn masked(&self, r: &Range<u64>) -> impl Iterator<Item = (usize, u64)> + '_ {
        let (first, last, head, tail) = span(r);
        (first..=last).map(move |w| {
            let mut m = !0u64;
            if w == first {
                m &= head;
            }
            if w == last {
                m &= tail;
            }
            (w, self.words[w] & m)
        })
    }

    pub fn set_range(&mut self, r: Range<u64>) {
        if r.is_empty() {
            return;
        }
        let (first, last, head, tail) = span(&r);
        for w in first..=last {
            let mut m = !0u64;
            if w == first {
                m &= head;
            }
            if w == last {
                m &= tail;
            }
            self.words[w] |= m;
        }
    }

    pub fn clear_range(&mut self, r: Range<u64>) {
        if r.is_empty() {
            return;
        }
        let (first, last, head, tail) = span(&r);
        for w in first..=last {
            let mut m = !0u64;
            if w == first {
                m &= head;
            }
            if w == last {
                m &= tail;
            }
            self.words[w] &= !m;
        }
    }

    pub fn range_clear(&self, r: Range<u64>) -> bool {
        r.is_empty() || self.masked(&r).all(|(_, w)| w == 0)
    }

    pub fn range_full(&self, r: Range<u64>) -> bool {
        self.count_range(r.clone()) == r.end - r.start
    }

    pub fn count_range(&self, r: Range<u64>) -> u64 {
        if r.is_empty() {
            return 0;
        }
        self.masked(&r).map(|(_, w)| w.count_ones() as u64).sum()
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn first_zero_in(&self, r: Range<u64>) -> Option<u64> {
        if r.is_empty() {
            return None;
        }
        let (first, last, head, tail) = span(&r);
        for w in first..=last {
            let mut m = !0u64;
            if w == first {
                m &= head;
            }
            if w == last {
                m &= tail;
            }
            let free = !self.words[w] & m;
            if free != 0 {
                return Some(w as u64 * 64 + free.trailing_zeros() as u64);
            }
        }
        None
    }

    pub fn ones(&self) -> impl Iterator<Item = u64> + '_ {
        self.words.iter().enumerate().flat_map(|(i, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as u64;
                w &= w - 1;
                Some(i as u64 * 64 + b)
            })
        })
    }
}
