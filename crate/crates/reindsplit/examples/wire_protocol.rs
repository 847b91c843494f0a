//! The binary activation-exchange codec.
//!
//! Encodes a smashed-activation frame, shows the layout, round-trips it,
//! and demonstrates that corruption and malformed frames produce typed
//! rejections rather than bad tensors.
//!
//! ```bash
//! cargo run --release --example wire_protocol
//! ```

use reindsplit::proto::{decode, encode, Message, WireTensor, HEADER_LEN};

fn main() {
    let msg = Message::Smashed {
        round: 12,
        device_id: 3,
        split: 2,
        activations: WireTensor {
            dims: vec![2, 4],
            data: vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.75, 1.125, 4.0],
        },
        labels: vec![1, 4],
    };

    let frame = encode(&msg).expect("finite tensor encodes");
    println!(
        "frame: {} bytes ({} header + {} payload)",
        frame.len(),
        HEADER_LEN,
        frame.len() - HEADER_LEN
    );
    println!("header bytes: {:02x?}", &frame[..HEADER_LEN]);

    let back = decode(&frame).expect("well-formed frame decodes");
    assert_eq!(back, msg);
    println!("round-trip: exact");

    // One flipped bit inside the tensor data: a CRC rejection, never a
    // silently wrong tensor.
    let mut corrupted = frame.clone();
    corrupted[HEADER_LEN + 12] ^= 0x01;
    println!("flipped payload bit -> {}", decode(&corrupted).unwrap_err());

    let mut bad_magic = frame.clone();
    bad_magic[0] = b'X';
    println!("bad magic          -> {}", decode(&bad_magic).unwrap_err());

    let mut bad_type = frame.clone();
    bad_type[6] = 42;
    println!("unknown msg type   -> {}", decode(&bad_type).unwrap_err());

    println!("truncated frame    -> {}", decode(&frame[..10]).unwrap_err());

    let mut oversized = frame;
    oversized[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
    println!("oversized payload  -> {}", decode(&oversized).unwrap_err());
}
