//! Generic bus payload for blocking transports.

/// Transfer direction of a transaction, as seen from the initiator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

/// Completion status of a transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Ok,
    AddressError,
    CommandError,
}

impl Response {
    pub fn is_ok(self) -> bool {
        self == Response::Ok
    }
}

/// One bus transaction.
///
/// The payload is created by the initiator and handed to the target through
/// a blocking transport. The target fills `data` on reads, consumes it on
/// writes, and must set the response exactly once.
#[derive(Debug)]
pub struct GenericPayload {
    pub address: u64,
    pub direction: Direction,
    /// When set, the initiator would like a DMI grant for this region.
    pub dmi_hint: bool,
    data: Vec<u8>,
    response: Option<Response>,
}

impl GenericPayload {
    /// A read of `len` bytes at `address`. `len` must be at least 1.
    pub fn read(address: u64, len: usize) -> Self {
        assert!(len >= 1, "payload data length must be >= 1");
        GenericPayload {
            address,
            direction: Direction::Read,
            dmi_hint: false,
            data: vec![0; len],
            response: None,
        }
    }

    /// A write of `data` at `address`. `data` must not be empty.
    pub fn write(address: u64, data: &[u8]) -> Self {
        assert!(!data.is_empty(), "payload data length must be >= 1");
        GenericPayload {
            address,
            direction: Direction::Write,
            dmi_hint: false,
            data: data.to_vec(),
            response: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction enforces len >= 1
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Sets the completion status. Targets call this exactly once.
    pub fn set_response(&mut self, response: Response) {
        debug_assert!(
            self.response.is_none(),
            "response set twice on one transport call"
        );
        self.response = Some(response);
    }

    /// The completion status, once the target has processed the payload.
    pub fn response(&self) -> Response {
        self.response
            .expect("transaction response read before the target set it")
    }

    pub fn has_response(&self) -> bool {
        self.response.is_some()
    }

    /// Clears the response so the payload can be re-sent (e.g. when a router
    /// forwards it down another hop).
    pub fn clear_response(&mut self) {
        self.response = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_payload_starts_zeroed_and_unresponded() {
        let txn = GenericPayload::read(0x1000, 4);
        assert_eq!(txn.data(), &[0, 0, 0, 0]);
        assert!(!txn.has_response());
    }

    #[test]
    #[should_panic(expected = "length must be >= 1")]
    fn zero_length_payload_is_rejected() {
        let _ = GenericPayload::read(0, 0);
    }

    #[test]
    #[cfg(debug_assertions)]
    #[should_panic(expected = "response set twice")]
    fn double_response_is_detected() {
        let mut txn = GenericPayload::write(0, &[1]);
        txn.set_response(Response::Ok);
        txn.set_response(Response::Ok);
    }
}
