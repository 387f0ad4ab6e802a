use pcct_nn::{Graph, ParamStore, Tensor, UNet, UNetConfig};

fn tiny_config(attention: bool, embed: bool) -> UNetConfig {
    UNetConfig {
        in_channels: 2,
        out_channels: 1,
        base_width: 4,
        channel_mults: vec![1, 2],
        attention,
        embed_dim: embed.then_some(8),
        embed_scale: 10.0,
        zero_init_output: false,
        seed: 3,
    }
}

fn input(n: usize, c: usize, h: usize, w: usize, phase: f64) -> Tensor<f64> {
    let data = (0..n * c * h * w).map(|i| ((i as f64) * 0.731 + phase).sin() * 0.8).collect();
    Tensor::from_vec(&[n, c, h, w], data)
}

fn loss_of(net: &UNet, ps: &ParamStore<f64>, x: &Tensor<f64>, t: &Tensor<f64>, cond: Option<&[f64]>, l1: bool) -> f64 {
    let g = Graph::new();
    let xv = g.input(x.clone());
    let y = net.forward(&g, ps, xv, cond);
    let l = if l1 { g.l1_loss(y, t.clone()) } else { g.mse_loss(y, t.clone()) };
    let v = g.value(l).item();
    v
}

fn check(attention: bool, embed: bool, l1: bool) {
    let mut ps = ParamStore::<f64>::new();
    let net = UNet::new(tiny_config(attention, embed), &mut ps);
    let x = input(2, 2, 4, 4, 0.3);
    let t = input(2, 1, 4, 4, 1.7);
    let cond_vals = [0.25, 0.8];
    let cond = embed.then_some(&cond_vals[..]);

    let g = Graph::new();
    let xv = g.input(x.clone());
    let y = net.forward(&g, &ps, xv, cond);
    let l = if l1 { g.l1_loss(y, t.clone()) } else { g.mse_loss(y, t.clone()) };
    let grads = g.backward(l);

    let h = 1e-6;
    let mut checked = 0;
    for id in 0..ps.len() {
        let n = ps.get(id).value.len();
        for &j in &[0, n / 2, n - 1] {
            let analytic = grads.get(id).map(|g| g.data()[j]).unwrap_or(0.0);
            let orig = ps.get(id).value.data()[j];
            ps.get_mut(id).value.data_mut()[j] = orig + h;
            let lp = loss_of(&net, &ps, &x, &t, cond, l1);
            ps.get_mut(id).value.data_mut()[j] = orig - h;
            let lm = loss_of(&net, &ps, &x, &t, cond, l1);
            ps.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-7);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4 || (analytic - numeric).abs() < 1e-8,
                "param {} [{j}]: analytic {analytic} numeric {numeric}",
                ps.get(id).name
            );
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn unet_gradients_match_finite_differences() {
    check(false, false, false);
}

#[test]
fn conditioned_attention_unet_gradients_match_finite_differences() {
    check(true, true, false);
}

#[test]
fn l1_loss_gradients_match_finite_differences() {
    check(true, true, true);
}

#[test]
fn output_shape_matches_input() {
    let mut ps = ParamStore::<f32>::new();
    let net = UNet::new(
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: 4,
            channel_mults: vec![1, 2, 2],
            attention: true,
            embed_dim: None,
            embed_scale: 1.0,
            zero_init_output: false,
            seed: 0,
        },
        &mut ps,
    );
    let x = Tensor::<f32>::zeros(&[1, 1, 12, 20]);
    let y = net.predict(&ps, x, None);
    assert_eq!(y.shape(), &[1, 1, 12, 20]);
}

#[test]
fn scalar_gain_gradient() {
    let x = input(1, 1, 3, 3, 0.1);
    let t = input(1, 1, 3, 3, 2.0);
    let loss = |k: f64| {
        let g = Graph::<f64>::new();
        let xv = g.input(x.clone());
        let kv = g.param(0, Tensor::from_vec(&[1], vec![k]));
        let l = g.mse_loss(g.mul_scalar(xv, kv), t.clone());
        let v = g.value(l).item();
        let grads = g.backward(l);
        (v, grads.get(0).unwrap().data()[0])
    };
    let k = 0.37;
    let (_, analytic) = loss(k);
    let numeric = (loss(k + 1e-6).0 - loss(k - 1e-6).0) / 2e-6;
    assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
}
