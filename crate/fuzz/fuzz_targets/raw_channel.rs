#![no_main]

use libfuzzer_sys::fuzz_target;
use radpos::volume::{decode_channel, encode_channel, ChannelName};

fuzz_target!(|data: &[u8]| {
    let Some((&sel, bytes)) = data.split_first() else { return };
    let channel = ChannelName::ALL[sel as usize % ChannelName::ALL.len()].as_str();
    assert!(decode_channel(channel, bytes, bytes.len()).is_err() || bytes.is_empty());
    if let Ok(values) = decode_channel(channel, bytes, bytes.len() / 4) {
        assert_eq!(encode_channel(&values), bytes);
    }
});
