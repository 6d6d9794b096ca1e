mod common;

use comforge::dsl::{parse_chain, parse_step, render_step};

#[test]
fn generated_steps_roundtrip() {
    let mut r = common::rng(1);
    for _ in 0..1000 {
        let g = common::gen_step(&mut r);
        common::check_step(&g).unwrap();
    }
}

#[test]
fn unicode_prose_keeps_byte_spans() {
    let s = "Zoom in → CROP_AND_ZOOMIN(bbx_1, 2)→img_1 then look … carefully";
    let step = parse_step(s).unwrap();
    assert_eq!(render_step(&step), s);
    assert_eq!(&s[step.spans()[0].clone()], "CROP_AND_ZOOMIN(bbx_1, 2)→img_1");
}

#[test]
fn chain_text_drops_step_labels() {
    let text = "Step 1: find GROUNDING(the sign)->bbx_1\nStep 2: read OCR(bbx_1)->txt_1=\"EXIT\"\nAnswer: EXIT";
    let chain = parse_chain(text).unwrap();
    assert_eq!(chain.steps.len(), 2);
    assert_eq!(chain.final_answer.as_deref(), Some("EXIT"));
    // step labels are dropped; the rest of each line is kept verbatim
    assert_eq!(chain.to_text(), text.replace("Step 1: ", "").replace("Step 2: ", ""));
}
