mod common;

use common::wire::message;
use proptest::prelude::*;
use teleop_core::protocol::{decode, encode, FrameDecoder};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn encode_decode_identity(msg in message()) {
        let bytes = encode(&msg).unwrap();
        prop_assert_eq!(bytes.last(), Some(&b'\n'));
        prop_assert!(!bytes[..bytes.len() - 1].contains(&b'\n'));
        prop_assert_eq!(decode(&bytes).unwrap(), msg.clone());
        prop_assert_eq!(encode(&msg).unwrap(), bytes);
    }

    #[test]
    fn chunked_stream_reassembles(msgs in prop::collection::vec(message(), 1..8), cut in 1usize..64) {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode(m).unwrap()).collect();
        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        for chunk in stream.chunks(cut) {
            dec.push(chunk);
            while let Some(frame) = dec.next_frame() {
                out.push(decode(&frame.unwrap()).unwrap());
            }
        }
        prop_assert_eq!(out, msgs);
        prop_assert_eq!(dec.pending(), 0);
    }
}
