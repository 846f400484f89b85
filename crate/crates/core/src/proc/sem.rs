//! Counting semaphores. Blocking is the kernel's job: `try_wait` only
//! reports whether the caller must park.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SemError {
    #[error("no such semaphore")]
    BadSid,
    #[error("semaphore has waiters")]
    Busy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Semaphore {
    pub value: u64,
    pub initial: u64,
    pub posts: u64,
    pub waits: u64,
}

#[derive(Clone, Debug, Default)]
pub struct SemTable {
    sems: BTreeMap<u32, Semaphore>,
    next: u32,
}

impl SemTable {
    pub fn create(&mut self, initial: u64) -> u32 {
        self.next += 1;
        self.sems.insert(self.next, Semaphore { value: initial, initial, posts: 0, waits: 0 });
        self.next
    }

    pub fn get(&self, sid: u32) -> Option<&Semaphore> {
        self.sems.get(&sid)
    }

    pub fn len(&self) -> usize {
        self.sems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sems.is_empty()
    }

    /// Decrements and returns true, or returns false when the value is 0.
    pub fn try_wait(&mut self, sid: u32) -> Result<bool, SemError> {
        let s = self.sems.get_mut(&sid).ok_or(SemError::BadSid)?;
        if s.value == 0 {
            return Ok(false);
        }
        s.value -= 1;
        s.waits += 1;
        Ok(true)
    }

    pub fn post(&mut self, sid: u32) -> Result<(), SemError> {
        let s = self.sems.get_mut(&sid).ok_or(SemError::BadSid)?;
        s.value += 1;
        s.posts += 1;
        Ok(())
    }

    pub fn free(&mut self, sid: u32, has_waiters: bool) -> Result<(), SemError> {
        if !self.sems.contains_key(&sid) {
            return Err(SemError::BadSid);
        }
        if has_waiters {
            return Err(SemError::Busy);
        }
        self.sems.remove(&sid);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mutex_shape() {
        let mut t = SemTable::default();
        let s = t.create(1);
        assert_eq!(t.try_wait(s), Ok(true));
        assert_eq!(t.try_wait(s), Ok(false));
        t.post(s).unwrap();
        assert_eq!(t.try_wait(s), Ok(true));
    }

    #[test]
    fn free_rules() {
        let mut t = SemTable::default();
        let s = t.create(0);
        assert_eq!(t.free(s, true), Err(SemError::Busy));
        assert_eq!(t.free(s, false), Ok(()));
        assert_eq!(t.post(s), Err(SemError::BadSid));
    }

    proptest! {
        #[test]
        fn conservation(ops in proptest::collection::vec(any::<bool>(), 0..200), init in 0u64..5) {
            let mut t = SemTable::default();
            let s = t.create(init);
            for post in ops {
                if post { t.post(s).unwrap(); } else { let _ = t.try_wait(s).unwrap(); }
                let v = *t.get(s).unwrap();
                prop_assert_eq!(v.value, v.initial + v.posts - v.waits);
            }
        }
    }
}
