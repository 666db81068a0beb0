use rankclip_core::tensor::fault;

#[test]
fn broken_exp_rule_fails_gradcheck() {
    assert_eq!(rankclip_cli::run(["rankclip-lab", "verify", "--mode", "gradcheck"]), 0);
    fault::break_exp_rule(true);
    let code = rankclip_cli::run(["rankclip-lab", "verify", "--mode", "gradcheck"]);
    fault::break_exp_rule(false);
    assert_eq!(code, 3);
}
