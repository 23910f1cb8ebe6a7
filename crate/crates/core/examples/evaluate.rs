//! Pixel F1 and mask AR on small hand-built instances.

use changekit::interchange::{BinaryMask, RleMask};
use changekit::metrics::{mask_ar_masks, pixel_prf, DEFAULT_MAX_DETS};

fn row(y: usize, x0: usize, x1: usize) -> RleMask {
    RleMask::encode(&BinaryMask::from_fn(4, 20, |yy, xx| yy == y && (x0..x1).contains(&xx)))
}

fn main() -> changekit::Result<()> {
    let pred = BinaryMask::from_fn(2, 2, |_, _| true);
    let gt = BinaryMask::from_fn(2, 2, |y, _| y == 0);
    let r = pixel_prf(&pred, &gt)?;
    println!("pixel: precision {:.3} recall {:.3} f1 {:.3}", r.precision, r.recall, r.f1);

    // IoUs of 0.6, 0.95 and 0.4 against two ground-truth objects
    let gts = [row(0, 0, 10), row(2, 0, 20)];
    let preds = [row(0, 0, 6), row(2, 0, 19), row(0, 6, 10)];
    let report = mask_ar_masks(&preds.iter().collect::<Vec<_>>(), &gts, DEFAULT_MAX_DETS)?;
    for (pct, recall) in &report.per_iou_recall {
        println!("  recall@{:.2} = {recall}", *pct as f64 / 100.0);
    }
    println!("mask AR = {:.2}", report.ar);
    Ok(())
}
