use super::RouterKind;

/// Predicted multiply-add count of routing `tokens` tokens through `experts`
/// experts of hidden size `hidden` and width `width`, up to a constant.
pub fn router_cost_model(
    tokens: usize,
    experts: usize,
    hidden: usize,
    width: usize,
    kind: RouterKind,
) -> f64 {
    let (n, m, dh, d) = (tokens as f64, experts as f64, hidden as f64, width as f64);
    match kind {
        RouterKind::TopkLinear => n * m * d,
        RouterKind::BruteforceL0 => n * m * dh * d,
        // column statistics O(M·D·d) plus inner products O(N·M·d)
        RouterKind::SparsityAware => (n + dh) * m * d,
    }
}
