use std::time::Instant;
use ctgrade::nn::layers::{Conv3d, GroupNorm, MaxPool3d};
use ctgrade::nn::ParamAlloc;
use ctgrade::segmentation::{SegConfig, UNet2d};

fn time<F: FnMut()>(label: &str, reps: usize, mut f: F) {
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{label}: {:.2} ms", t.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

#[test]
#[ignore]
fn probe_parts() {
    let net = UNet2d::new(SegConfig::default()).unwrap();
    let (h, w) = (128, 128);
    let x: Vec<f32> = (0..h * w).map(|i| (i % 97) as f32 / 97.0).collect();
    let tr = net.forward_trace(&net.params, &x, h, w);
    time("unet fwd", 5, || {
        let _ = net.forward_trace(&net.params, &x, h, w);
    });
    let dprobs = vec![1e-4f32; h * w];
    time("unet bwd", 5, || {
        let mut g = vec![0.0f32; net.n_params()];
        net.backward(&net.params, &tr, h, w, &dprobs, &mut g);
    });

    let mut alloc = ParamAlloc::new();
    let conv = Conv3d::new(&mut alloc, 16, 16, (1, 3, 3), (1, 1, 1), (0, 1, 1));
    let mut params = vec![0.01f32; alloc.total()];
    params[3] = 0.4;
    let din = (1, 128, 128);
    let xc = vec![0.3f32; 16 * 128 * 128];
    time("conv16x16@128 fwd", 10, || {
        let _ = conv.forward(&params, &xc, din);
    });
    let dy = vec![1e-3f32; 16 * 128 * 128];
    time("conv16x16@128 bwd", 10, || {
        let mut g = vec![0.0f32; alloc.total()];
        let _ = conv.backward(&params, &xc, din, &dy, &mut g);
    });

    let mut alloc = ParamAlloc::new();
    let gn = GroupNorm::new(&mut alloc, 16, 8);
    let mut gp = vec![1.0f32; alloc.total()];
    for i in 16..32 { gp[i] = 0.0; }
    time("gn16@128 fwd", 20, || {
        let _ = gn.forward(&gp, &xc, 128 * 128);
    });
    time("gn16@128 bwd", 20, || {
        let mut g = vec![0.0f32; 32];
        let _ = gn.backward(&gp, &xc, 128 * 128, &dy, &mut g);
    });

    let pool = MaxPool3d { kernel: (1, 2, 2), stride: (1, 2, 2) };
    time("pool16@128 fwd+bwd", 20, || {
        let (y, _) = pool.forward(&xc, 16, (1, 128, 128));
        let _ = pool.backward(&xc, 16, (1, 128, 128), &y);
    });
}
