use holonome::critical;
use holonome::linalg;
use nalgebra::DVector;
use holonome::mechsys::MechSystem;

fn main() {
    let text = include_str!("/root/crate/fixtures/skate_warped.cfg");
    let sys = MechSystem::load_system(text).unwrap();
    let mut q = DVector::from_column_slice(&[0.1, 1.0, 0.05]);
    for it in 0..12 {
        let r = critical::critical_residual(&sys, &q).unwrap();
        let j = critical::residual_jacobian(&sys, &q).unwrap();
        // FD check of jacobian here
        let h = 1e-6;
        let mut maxdiff: f64 = 0.0;
        for col in 0..3 {
            let mut qp = q.clone(); let mut qm = q.clone();
            qp[col] += h; qm[col] -= h;
            let rp = critical::critical_residual(&sys, &qp).unwrap();
            let rm = critical::critical_residual(&sys, &qm).unwrap();
            for row in 0..3 {
                maxdiff = maxdiff.max((j[(row,col)] - (rp[row]-rm[row])/(2.0*h)).abs());
            }
        }
        let step = -(linalg::pinv(&j) * &r);
        println!("it {it}: q = [{:.4}, {:.4}, {:.4}] |r| = {:.3e} jacFDdiff = {:.2e} |step| = {:.3e}",
            q[0], q[1], q[2], r.norm(), maxdiff, step.norm());
        q += step;
    }
}
