use tunnel_racer::trackgeom::Track;
fn main() {
    let track = Track::split_s();
    let cl = &track.centerline;
    let total = cl.total_length();
    println!("total {total}");
    for (i, th) in cl.gate_thetas().iter().enumerate() {
        println!("gate {i} theta {th:.2} frac {:.3}", th / total);
    }
    // curvature profile
    let n = 2000;
    let mut worst = (0.0, 0.0);
    for i in 0..n {
        let th = total * i as f64 / n as f64;
        let (_, _, ddp) = cl.position_derivs(th);
        let k = ddp.norm();
        if k > worst.0 { worst = (k, th); }
    }
    println!("max curvature {:.3} at theta {:.2} (frac {:.3}) radius {:.2}", worst.0, worst.1, worst.1/total, 1.0/worst.0);
    // curvature near the max
    for d in [-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5] {
        let th = (worst.1 + d).rem_euclid(total);
        let (p, _, ddp) = cl.position_derivs(th);
        println!("  theta {th:.2}: kappa {:.3} p=({:.2},{:.2},{:.2})", ddp.norm(), p.x, p.y, p.z);
    }
}
