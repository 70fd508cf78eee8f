use fedshare_core::ring::{FixedPointConfig, RingVector};
use fedshare_core::transport::{decode_frame, encode_frame, FrameDecoder, FrameError, Message, MessageKind};
use proptest::prelude::*;

fn message_strategy() -> impl Strategy<Value = Message> {
    let payload = (3u32..=128)
        .prop_flat_map(|l| (Just(l), 1..l - 1, prop::collection::vec(any::<u128>(), 0..40)))
        .prop_map(|(l, f, raw)| {
            let cfg = FixedPointConfig::new(l, f).unwrap();
            RingVector::from_values(cfg, raw.into_iter().map(|v| cfg.reduce(v)).collect()).unwrap()
        });
    (prop::sample::select(MessageKind::ALL.to_vec()), any::<u32>(), any::<u32>(), payload).prop_map(
        |(kind, round, sender, payload)| {
            let payload = kind.has_payload().then_some(payload);
            Message::new(kind, round, sender, payload).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn frames_roundtrip(msg in message_strategy()) {
        let bytes = encode_frame(&msg);
        prop_assert_eq!(bytes.len(), msg.frame_len());
        prop_assert_eq!(decode_frame(&bytes).unwrap(), msg);
    }

    #[test]
    fn decoder_reassembles_arbitrary_splits(
        msgs in prop::collection::vec(message_strategy(), 1..6),
        cuts in prop::collection::vec(1usize..64, 1..40),
    ) {
        let stream: Vec<u8> = msgs.iter().flat_map(encode_frame).collect();
        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        let mut pos = 0;
        for c in cuts.iter().cycle() {
            if pos >= stream.len() {
                break;
            }
            let end = (pos + c).min(stream.len());
            dec.push(&stream[pos..end]);
            pos = end;
            while let Some(m) = dec.next_message().unwrap() {
                out.push(m);
            }
        }
        prop_assert_eq!(out, msgs);
        prop_assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn truncated_frames_are_rejected(msg in message_strategy(), cut in 0.0f64..1.0) {
        let bytes = encode_frame(&msg);
        let keep = ((bytes.len() as f64) * cut) as usize;
        prop_assume!(keep < bytes.len());
        prop_assert!(decode_frame(&bytes[..keep]).is_err());
    }
}

#[test]
fn corrupted_headers_are_rejected() {
    let cfg = FixedPointConfig::new(64, 16).unwrap();
    let msg = Message::new(MessageKind::ShareUpload, 1, 2, Some(RingVector::zeros(cfg, 3))).unwrap();
    let good = encode_frame(&msg);
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode_frame(&bad), Err(FrameError::BadMagic(_))));
    let mut bad = good.clone();
    bad[4] = 9;
    assert!(matches!(decode_frame(&bad), Err(FrameError::UnsupportedVersion(9))));
    let mut bad = good;
    bad[5] = 77;
    assert!(matches!(decode_frame(&bad), Err(FrameError::UnknownKind(77))));
}
