//! Saves a freshly initialized model, reloads it and confirms the bytes
//! and predictions are unchanged. Also prints the checkpoint layout.
//!
//! cargo run --release --example checkpoint_roundtrip

use dproto::backbone::BackboneConfig;
use dproto::checkpoint;
use dproto::dataset::{render_sample, SyntheticSpec};
use dproto::model::{Model, ProtoLayerConfig};

fn main() -> dproto::Result<()> {
    let spec = SyntheticSpec::default();
    let model = Model::new(&BackboneConfig::default(), &ProtoLayerConfig::default(), spec.class_names(), 42)?;
    let config = serde_json::json!({"note": "any JSON can ride along"});
    let bytes = checkpoint::to_bytes(&model, Some(&config))?;
    let header_len = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
    println!(
        "magic {:?}, header {header_len} bytes, payload {} bytes",
        String::from_utf8_lossy(&bytes[..7]),
        bytes.len() as u64 - 15 - header_len
    );

    let back = checkpoint::from_bytes(&bytes)?;
    assert_eq!(back.model, model);
    assert_eq!(checkpoint::to_bytes(&back.model, back.run_config.as_ref())?, bytes);
    let x = render_sample(&spec, 0, 1).image;
    let (a, b) = (model.predict(&x)?, back.model.predict(&x)?);
    println!("round trip is bit-exact; logits {:?} == {:?}", a.logits, b.logits);
    Ok(())
}
