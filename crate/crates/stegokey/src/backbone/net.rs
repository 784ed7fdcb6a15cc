//! The encoder-decoder topology and its hand-derived backward pass.
//!
//! Layer order (also the manifest order of kernel tensors):
//!
//! ```text
//! stem                      6 -> w           stride 1
//! for s in 1..=depth:
//!   enc{s}.down             w*2^(s-1) -> w*2^s   stride 2
//!   enc{s}.conv             w*2^s -> w*2^s       stride 1
//! for s in depth..=1:
//!   dec{s}.up   (after x2 nearest upsample)  w*2^s -> w*2^(s-1)
//!   dec{s}.fuse (after skip concat)          w*2^s -> w*2^(s-1)
//! skip                      6 -> 3           stride 1 (from the input)
//! head                      w -> 3           stride 1
//! output = sigmoid(head(features) + skip(input))
//! ```
//!
//! Every hidden convolution is followed by the configured nonlinearity.
//! The decoder fuse at stage `s` concatenates the upsampled path with the
//! encoder output of stage `s-1`. The global input-to-logits skip makes
//! identity-like behavior (reproducing the cover or the noisy input)
//! linearly reachable, so training capacity goes to the residual signal.

use ndarray::Array4;

use super::ops::{
    act_backward, act_forward, concat_channels, conv2d_backward_batch, conv2d_batch, sigmoid,
    sigmoid_backward, split_channels, upsample2, upsample2_backward, ConvSpec,
};
use super::Nonlinearity;

#[derive(Debug)]
pub(crate) struct Net {
    pub depth: usize,
    pub act: Nonlinearity,
    pub convs: Vec<ConvSpec>,
}

/// Borrowed flat parameter tensors in manifest order.
pub(crate) struct ParamsView<'a> {
    pub kernels: Vec<&'a [f64]>,
    pub biases: Vec<&'a [f64]>,
}

/// Gradients in the same layout as the parameters.
#[derive(Debug, Clone)]
pub(crate) struct Grads {
    pub kernels: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros(net: &Net) -> Self {
        Grads {
            kernels: net.convs.iter().map(|c| vec![0.0; c.kernel_len()]).collect(),
            biases: net.convs.iter().map(|c| vec![0.0; c.out_c]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Intermediate tensors kept for the backward pass.
pub(crate) struct Cache {
    conv_in: Vec<Array4<f64>>,
    conv_z: Vec<Array4<f64>>,
    pub y: Array4<f64>,
}

pub(crate) struct ForwardOut {
    pub y: Array4<f64>,
    pub logits: Option<Array4<f64>>,
    pub penult: Option<Array4<f64>>,
    pub cache: Option<Cache>,
}

#[derive(Default, Clone, Copy)]
pub(crate) struct Capture {
    pub cache: bool,
    pub logits: bool,
    pub penult: bool,
}

impl Net {
    pub fn new(width: usize, depth: usize, act: Nonlinearity) -> Self {
        let mut convs = Vec::with_capacity(4 * depth + 3);
        convs.push(ConvSpec { name: "stem".into(), in_c: 6, out_c: width, stride: 1 });
        for s in 1..=depth {
            let (ci, co) = (width << (s - 1), width << s);
            convs.push(ConvSpec { name: format!("enc{s}.down"), in_c: ci, out_c: co, stride: 2 });
            convs.push(ConvSpec { name: format!("enc{s}.conv"), in_c: co, out_c: co, stride: 1 });
        }
        for s in (1..=depth).rev() {
            let (ci, co) = (width << s, width << (s - 1));
            convs.push(ConvSpec { name: format!("dec{s}.up"), in_c: ci, out_c: co, stride: 1 });
            convs.push(ConvSpec { name: format!("dec{s}.fuse"), in_c: ci, out_c: co, stride: 1 });
        }
        convs.push(ConvSpec { name: "skip".into(), in_c: 6, out_c: 3, stride: 1 });
        convs.push(ConvSpec { name: "head".into(), in_c: width, out_c: 3, stride: 1 });
        Net { depth, act, convs }
    }

    pub fn n_convs(&self) -> usize {
        self.convs.len()
    }

    fn idx_stem(&self) -> usize {
        0
    }

    fn idx_down(&self, s: usize) -> usize {
        2 * s - 1
    }

    fn idx_enc_conv(&self, s: usize) -> usize {
        2 * s
    }

    fn idx_up(&self, s: usize) -> usize {
        2 * self.depth + 1 + 2 * (self.depth - s)
    }

    fn idx_fuse(&self, s: usize) -> usize {
        self.idx_up(s) + 1
    }

    fn idx_skip(&self) -> usize {
        4 * self.depth + 1
    }

    fn idx_head(&self) -> usize {
        4 * self.depth + 2
    }

    /// Forward pass over a 6-channel batch.
    pub fn forward(&self, p: &ParamsView, x6: &Array4<f64>, cap: Capture) -> ForwardOut {
        let n_convs = self.n_convs();
        let mut conv_in: Vec<Array4<f64>> = Vec::new();
        let mut conv_z: Vec<Array4<f64>> = Vec::new();
        if cap.cache {
            conv_in = vec![Array4::zeros((0, 0, 0, 0)); n_convs];
            conv_z = vec![Array4::zeros((0, 0, 0, 0)); n_convs];
        }

        macro_rules! conv {
            ($i:expr, $x:expr) => {{
                let i = $i;
                let x = $x;
                let z = conv2d_batch(&x, p.kernels[i], p.biases[i], &self.convs[i]);
                if cap.cache {
                    conv_in[i] = x;
                    conv_z[i] = z.clone();
                }
                z
            }};
        }

        let mut cur = act_forward(self.act, &conv!(self.idx_stem(), x6.clone()));
        let mut stages: Vec<Array4<f64>> = vec![cur.clone()];
        for s in 1..=self.depth {
            let t = act_forward(self.act, &conv!(self.idx_down(s), cur));
            cur = act_forward(self.act, &conv!(self.idx_enc_conv(s), t));
            stages.push(cur.clone());
        }
        for s in (1..=self.depth).rev() {
            let u = act_forward(self.act, &conv!(self.idx_up(s), upsample2(&cur)));
            let cat = concat_channels(&u, &stages[s - 1]);
            cur = act_forward(self.act, &conv!(self.idx_fuse(s), cat));
        }
        let penult = cur.clone();
        let logits = conv!(self.idx_head(), cur) + conv!(self.idx_skip(), x6.clone());
        let y = sigmoid(&logits);

        ForwardOut {
            logits: cap.logits.then(|| logits.clone()),
            penult: cap.penult.then_some(penult),
            cache: cap.cache.then(|| Cache { conv_in, conv_z, y: y.clone() }),
            y,
        }
    }

    /// Backward pass; `dy` is the loss gradient at the sigmoid output.
    /// Returns parameter gradients and, when `need_dx`, the gradient at the
    /// 6-channel input.
    pub fn backward(
        &self,
        p: &ParamsView,
        cache: &Cache,
        dy: &Array4<f64>,
        need_dx: bool,
    ) -> (Grads, Option<Array4<f64>>) {
        let mut grads = Grads::zeros(self);
        let d = self.depth;

        macro_rules! conv_bwd {
            ($i:expr, $dz:expr, $need:expr) => {{
                let i = $i;
                let g = conv2d_backward_batch(&cache.conv_in[i], p.kernels[i], &self.convs[i], &$dz, $need);
                grads.kernels[i] = g.dkernel;
                grads.biases[i] = g.dbias;
                g.dx
            }};
        }

        // output: logits = head(penult) + skip(input)
        let dz_head = sigmoid_backward(&cache.y, dy);
        let dx_skip = conv_bwd!(self.idx_skip(), dz_head, need_dx);
        let dpen = conv_bwd!(self.idx_head(), dz_head, true).unwrap();

        // decoder, unwinding in reverse of forward order
        let mut dstage: Vec<Option<Array4<f64>>> = vec![None; d + 1];
        let mut dcur = dpen; // gradient w.r.t. decoder output of stage s-1
        for s in 1..=d {
            let i_fuse = self.idx_fuse(s);
            let dz = act_backward(self.act, &cache.conv_z[i_fuse], &dcur);
            let dcat = conv_bwd!(i_fuse, dz, true).unwrap();
            let half = self.convs[self.idx_up(s)].out_c;
            let (du, dskip) = split_channels(&dcat, half);
            match &mut dstage[s - 1] {
                Some(acc) => *acc += &dskip,
                slot => *slot = Some(dskip),
            }
            let i_up = self.idx_up(s);
            let dzu = act_backward(self.act, &cache.conv_z[i_up], &du);
            let dupin = conv_bwd!(i_up, dzu, true).unwrap();
            let dys = upsample2_backward(&dupin);
            if s == d {
                match &mut dstage[d] {
                    Some(acc) => *acc += &dys,
                    slot => *slot = Some(dys),
                }
            } else {
                dcur = dys;
            }
        }
        if d == 0 {
            dstage[0] = Some(dcur);
        }

        // encoder
        for s in (1..=d).rev() {
            let g = dstage[s].take().expect("stage gradient");
            let i_conv = self.idx_enc_conv(s);
            let dz = act_backward(self.act, &cache.conv_z[i_conv], &g);
            let dt = conv_bwd!(i_conv, dz, true).unwrap();
            let i_down = self.idx_down(s);
            let dz2 = act_backward(self.act, &cache.conv_z[i_down], &dt);
            let dprev = conv_bwd!(i_down, dz2, true).unwrap();
            match &mut dstage[s - 1] {
                Some(acc) => *acc += &dprev,
                slot => *slot = Some(dprev),
            }
        }

        let g0 = dstage[0].take().expect("stem gradient");
        let dz = act_backward(self.act, &cache.conv_z[self.idx_stem()], &g0);
        let mut dx6 = conv_bwd!(self.idx_stem(), dz, need_dx);
        if let (Some(total), Some(skip)) = (dx6.as_mut(), dx_skip) {
            *total += &skip;
        }
        (grads, dx6)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;

    fn random_params(net: &Net, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let root = SeedStream::new(seed);
        let kernels = net
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = root.substream(i as u64);
                (0..c.kernel_len()).map(|k| s.symmetric_f64(k as u64, 0.3)).collect()
            })
            .collect();
        let biases = net
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = root.substream(1000 + i as u64);
                (0..c.out_c).map(|k| s.symmetric_f64(k as u64, 0.05)).collect()
            })
            .collect();
        (kernels, biases)
    }

    fn view<'a>(k: &'a [Vec<f64>], b: &'a [Vec<f64>]) -> ParamsView<'a> {
        ParamsView {
            kernels: k.iter().map(|v| v.as_slice()).collect(),
            biases: b.iter().map(|v| v.as_slice()).collect(),
        }
    }

    fn rand_input(n: usize, side: usize, seed: u64) -> Array4<f64> {
        let s = SeedStream::new(seed);
        let mut c = 0;
        Array4::from_shape_simple_fn((n, 6, side, side), || {
            c += 1;
            s.unit_f64(c)
        })
    }

    #[test]
    fn forward_shapes_hold_for_depths() {
        for depth in 0..=2 {
            let net = Net::new(8, depth, Nonlinearity::LeakyRelu);
            let (k, b) = random_params(&net, 1);
            let x = rand_input(2, 16, 2);
            let out = net.forward(&view(&k, &b), &x, Capture::default());
            assert_eq!(out.y.dim(), (2, 3, 16, 16), "depth {depth}");
            assert!(out.y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        // smooth activation keeps the finite-difference comparison clean
        let net = Net::new(4, 1, Nonlinearity::Silu);
        let (mut k, mut b) = random_params(&net, 7);
        let x = rand_input(1, 8, 8);
        let target = rand_input(1, 8, 9)
            .slice(ndarray::s![.., ..3, .., ..])
            .to_owned();

        let loss = |k: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
            let out = net.forward(&view(k, b), &x, Capture::default());
            (&out.y - &target).iter().map(|v| v * v).sum::<f64>() / out.y.len() as f64
        };

        let out = net.forward(&view(&k, &b), &x, Capture { cache: true, ..Default::default() });
        let cache = out.cache.as_ref().unwrap();
        let dy = (&out.y - &target).mapv(|v| 2.0 * v / out.y.len() as f64);
        let (grads, _) = net.backward(&view(&k, &b), cache, &dy, false);

        let h = 1e-6;
        let mut checked = 0;
        for ci in 0..net.n_convs() {
            let stride = (k[ci].len() / 7).max(1);
            for wi in (0..k[ci].len()).step_by(stride) {
                let orig = k[ci][wi];
                k[ci][wi] = orig + h;
                let lp = loss(&k, &b);
                k[ci][wi] = orig - h;
                let lm = loss(&k, &b);
                k[ci][wi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.kernels[ci][wi];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "conv {ci} w {wi}: fd {fd} analytic {an}"
                );
                checked += 1;
            }
            let orig = b[ci][0];
            b[ci][0] = orig + h;
            let lp = loss(&k, &b);
            b[ci][0] = orig - h;
            let lm = loss(&k, &b);
            b[ci][0] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.biases[ci][0];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4);
        }
        assert!(checked > 20);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Net::new(4, 1, Nonlinearity::Silu);
        let (k, b) = random_params(&net, 3);
        let mut x = rand_input(1, 8, 4);

        let loss = |x: &Array4<f64>| -> f64 {
            let out = net.forward(&view(&k, &b), x, Capture::default());
            out.y.iter().map(|v| v * v).sum::<f64>()
        };

        let out = net.forward(&view(&k, &b), &x, Capture { cache: true, ..Default::default() });
        let dy = out.y.mapv(|v| 2.0 * v);
        let (_, dx) = net.backward(&view(&k, &b), out.cache.as_ref().unwrap(), &dy, true);
        let dx = dx.unwrap();

        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 3, 4, 4), (0, 5, 7, 7), (0, 2, 1, 6)] {
            let orig = x[idx];
            x[idx] = orig + h;
            let lp = loss(&x);
            x[idx] = orig - h;
            let lm = loss(&x);
            x[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dx[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-4,
                "{idx:?}: fd {fd} analytic {an}"
            );
        }
    }
}
