/// Learning rate at a fractional epoch: constant up to `decay_start`, then linear to zero
/// at `epochs`.
pub fn lr_at(base: f64, epoch: f64, decay_start: usize, epochs: usize) -> f64 {
    let (start, end) = (decay_start as f64, epochs as f64);
    if epoch <= start {
        return base;
    }
    if end <= start || epoch >= end {
        return 0.0;
    }
    base * (end - epoch) / (end - start)
}
