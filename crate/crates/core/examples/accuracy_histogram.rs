//! Five-point accuracy histograms: a value in [a-5%, a) is counted under label a.

use kt::eval::accuracy_histogram;

fn main() {
    let accs: [f32; 8] = [0.10, 0.2999, 0.30, 0.34, 0.35, 0.47, 0.99, 1.0];
    let h = accuracy_histogram(&accs);
    for (label, count) in h.labels.iter().zip(&h.counts).filter(|(_, c)| **c > 0) {
        println!("{:>3}%: {}", label, "#".repeat(*count));
    }
    print!("\n{}", h.to_csv());
}
