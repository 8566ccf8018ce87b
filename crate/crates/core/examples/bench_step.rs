use std::time::Instant;
use ssmb_core::backbone::{max_pool2, BackboneConfig, ModelState};
use ssmb_core::ssmb::GateMode;
use ssmb_core::tape::Tape;
use ssmb_core::tensor::Tensor;

fn main() {
    let mut model: ModelState<f32> = ModelState::build(BackboneConfig::default(), 1).unwrap();
    model.attach_ssmb(4, GateMode::GateScaled, 2);
    let images = Tensor::<f32>::filled(vec![48, 3, 32, 32], 0.5);

    // isolated conv stage 0: 48x3x32x32 -> 48x8x32x32
    let w0 = model.param("backbone.conv0.weight").unwrap().value.clone();
    let b0 = model.param("backbone.conv0.bias").unwrap().value.clone();
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let _ = tape.conv2d(x, w, b, 1, 1).unwrap();
    }
    println!("conv0 fwd x5: {:?}", t0.elapsed());

    // isolated relu on 48x8x32x32
    let big = Tensor::<f32>::filled(vec![48, 8, 32, 32], 0.5);
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let x = tape.leaf(big.clone());
        let _ = tape.relu(x);
    }
    println!("relu x5: {:?}", t0.elapsed());

    // isolated maxpool on 48x8x32x32
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let x = tape.leaf(big.clone());
        let _ = max_pool2(&mut tape, x).unwrap();
    }
    println!("pool x5: {:?}", t0.elapsed());

    // one ssmb block on 48x8x32x32
    use ssmb_core::ssmb::{forward_on_tape, SsmbBlock, SsmbConfig};
    let block: SsmbBlock<f32> = SsmbBlock::new(SsmbConfig::new(8, 4, GateMode::GateScaled), 3);
    let t0 = Instant::now();
    for _ in 0..5 {
        let mut tape = Tape::new();
        let vars = block.bind_with(&mut tape, false);
        let x = tape.leaf(big.clone());
        let _ = forward_on_tape(&mut tape, &vars, x, &block.config).unwrap();
    }
    println!("ssmb block x5: {:?}", t0.elapsed());
}
