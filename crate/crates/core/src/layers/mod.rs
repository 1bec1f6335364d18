//! Learned operators: strided convolution, transposed convolution, pooling,
//! the shared two-layer MLP and the ConvLSTM cell.

mod convlstm;

pub use convlstm::{convlstm_step, encode_sequence, BranchState, ConvLstmCell};

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};

/// Zero-padded 2-D cross-correlation with kernel `[out, in, k, k]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let area = kernel_size * kernel_size;
        let kernel = store.add_glorot(
            format!("{name}.kernel"),
            &[out_ch, in_ch, kernel_size, kernel_size],
            in_ch * area,
            out_ch * area,
            rng,
        )?;
        let bias = store.add_constant(format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Conv2dLayer {
            kernel,
            bias: Some(bias),
            in_ch,
            out_ch,
            kernel_size,
            stride,
            padding,
        })
    }

    /// Output extent along one axis for an input extent `n`.
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let span = (n + 2 * self.padding).checked_sub(self.kernel_size)?;
        Some(span / self.stride + 1)
    }
}

pub fn conv2d(g: &mut Graph<'_>, x: Var, layer: &Conv2dLayer) -> Result<Var> {
    let c = g.tape.shape(x)[0];
    if c != layer.in_ch {
        return Err(Error::shape("conv2d channels", &[c], &[layer.in_ch]));
    }
    let w = g.param(layer.kernel);
    let b = layer.bias.map(|b| g.param(b));
    g.tape.conv2d(x, w, b, layer.stride, layer.padding)
}

/// Transposed convolution with kernel `[in, out, k, k]` and bias `[out]`.
#[derive(Clone, Debug)]
pub struct Deconv2dLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Deconv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let area = kernel_size * kernel_size;
        let kernel = store.add_glorot(
            format!("{name}.kernel"),
            &[in_ch, out_ch, kernel_size, kernel_size],
            in_ch * area,
            out_ch * area,
            rng,
        )?;
        let bias = store.add_constant(format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok(Deconv2dLayer {
            kernel,
            bias,
            in_ch,
            out_ch,
            kernel_size,
            stride,
            padding,
        })
    }
}

pub fn deconv2d(g: &mut Graph<'_>, x: Var, layer: &Deconv2dLayer) -> Result<Var> {
    let c = g.tape.shape(x)[0];
    if c != layer.in_ch {
        return Err(Error::shape("deconv2d channels", &[c], &[layer.in_ch]));
    }
    let w = g.param(layer.kernel);
    let b = g.param(layer.bias);
    g.tape.deconv2d(x, w, Some(b), layer.stride, layer.padding)
}

/// `[mean over channels; max over channels]` as a 2-channel map.
pub fn channel_pool(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    g.tape.channel_pool(x)
}

/// Per-channel spatial `(average, max)` vectors.
pub fn global_pool(g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
    Ok((g.tape.global_avg_pool(x)?, g.tape.global_max_pool(x)?))
}

/// Two dense layers `C → hidden → C` with a ReLU between them.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

/// Hidden width for reduction ratio `r`, floored at 4.
pub fn mlp_hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(4)
}

impl SharedMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hidden = mlp_hidden_width(channels, reduction);
        Ok(SharedMlp {
            w1: store.add_glorot(
                format!("{name}.w1"),
                &[hidden, channels],
                channels,
                hidden,
                rng,
            )?,
            b1: store.add_constant(format!("{name}.b1"), &[hidden], 0.0)?,
            w2: store.add_glorot(
                format!("{name}.w2"),
                &[channels, hidden],
                hidden,
                channels,
                rng,
            )?,
            b2: store.add_constant(format!("{name}.b2"), &[channels], 0.0)?,
            channels,
            hidden,
        })
    }
}

pub fn mlp_apply(g: &mut Graph<'_>, v: Var, mlp: &SharedMlp) -> Result<Var> {
    let len = g.tape.shape(v);
    if len != [mlp.channels] {
        return Err(Error::shape("mlp_apply", len, &[mlp.channels]));
    }
    let (w1, b1, w2, b2) = (
        g.param(mlp.w1),
        g.param(mlp.b1),
        g.param(mlp.w2),
        g.param(mlp.b2),
    );
    let hidden = g.tape.linear(v, w1, Some(b1))?;
    let hidden = g.tape.relu(hidden);
    g.tape.linear(hidden, w2, Some(b2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
        store.get_mut(id).value = t;
    }

    #[test]
    fn stride_two_pointwise_conv() {
        let mut store = ParamStore::new();
        let layer = Conv2dLayer::new(&mut store, "c", 1, 1, 1, 2, 0, &mut rng()).unwrap();
        set(
            &mut store,
            layer.kernel,
            Tensor::full([1, 1, 1, 1], 2.0).unwrap(),
        );
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::ones([1, 4, 4]).unwrap());
        let y = conv2d(&mut g, x, &layer).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut store = ParamStore::new();
        let layer = Conv2dLayer::new(&mut store, "c", 2, 3, 3, 1, 1, &mut rng()).unwrap();
        set(
            &mut store,
            layer.kernel,
            Tensor::zeros([3, 2, 3, 3]).unwrap(),
        );
        set(
            &mut store,
            layer.bias.unwrap(),
            Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap(),
        );
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full([2, 5, 5], 7.0).unwrap());
        let y = conv2d(&mut g, x, &layer).unwrap();
        for (c, plane) in g.value(y).data().chunks(25).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn conv_errors() {
        let mut store = ParamStore::new();
        let layer = Conv2dLayer::new(&mut store, "c", 2, 1, 7, 1, 0, &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let wrong = g.input(Tensor::ones([3, 8, 8]).unwrap());
        assert!(conv2d(&mut g, wrong, &layer).is_err());
        let tiny = g.input(Tensor::ones([2, 3, 3]).unwrap());
        assert!(conv2d(&mut g, tiny, &layer).is_err());
    }

    #[test]
    fn encoder_downsampling_to_quarter() {
        let mut store = ParamStore::new();
        let c1 = Conv2dLayer::new(&mut store, "c1", 1, 2, 3, 2, 1, &mut rng()).unwrap();
        let c2 = Conv2dLayer::new(&mut store, "c2", 2, 2, 3, 2, 1, &mut rng()).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::ones([1, 64, 64]).unwrap());
        let y = conv2d(&mut g, x, &c1).unwrap();
        let y = conv2d(&mut g, y, &c2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 16, 16]);
    }

    #[test]
    fn deconv_shapes() {
        let mut store = ParamStore::new();
        let d1 = Deconv2dLayer::new(&mut store, "d1", 2, 2, 4, 2, 1, &mut rng()).unwrap();
        let d2 = Deconv2dLayer::new(&mut store, "d2", 2, 1, 4, 2, 1, &mut rng()).unwrap();
        let unit = Deconv2dLayer::new(&mut store, "u", 1, 1, 2, 2, 0, &mut rng()).unwrap();
        set(&mut store, unit.kernel, Tensor::ones([1, 1, 2, 2]).unwrap());
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::ones([2, 16, 16]).unwrap());
        let y = deconv2d(&mut g, x, &d1).unwrap();
        let y = deconv2d(&mut g, y, &d2).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 64, 64]);
        let s = g.input(Tensor::full([1, 1, 1], 3.5).unwrap());
        let z = deconv2d(&mut g, s, &unit).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 2, 2]);
        assert!(g.value(z).data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn pooling_constant_and_spike() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full([3, 2, 2], 1.5).unwrap());
        let p = channel_pool(&mut g, x).unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 1.5));
        let single = g.input(Tensor::new([1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let p1 = channel_pool(&mut g, single).unwrap();
        assert_eq!(&g.value(p1).data()[..4], g.value(single).data());
        assert_eq!(&g.value(p1).data()[4..], g.value(single).data());

        let mut spike = vec![0.0; 9];
        spike[4] = 1.0;
        let s = g.input(Tensor::new([1, 3, 3], spike).unwrap());
        let (avg, max) = global_pool(&mut g, s).unwrap();
        assert_eq!(g.value(max).data(), &[1.0]);
        assert!((g.value(avg).data()[0] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn mlp_zero_weights_and_identity() {
        let mut store = ParamStore::new();
        let mlp = SharedMlp::new(&mut store, "m", 4, 1, &mut rng()).unwrap();
        assert_eq!(mlp.hidden, 4);
        set(&mut store, mlp.w1, Tensor::zeros([4, 4]).unwrap());
        set(&mut store, mlp.w2, Tensor::zeros([4, 4]).unwrap());
        set(
            &mut store,
            mlp.b2,
            Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        {
            let mut g = Graph::new(&store);
            let v = g.input(Tensor::new([4], vec![9.0, -9.0, 1.0, 0.0]).unwrap());
            let out = mlp_apply(&mut g, v, &mlp).unwrap();
            assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
        }
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        set(
            &mut store,
            mlp.w1,
            Tensor::new([4, 4], eye.clone()).unwrap(),
        );
        set(&mut store, mlp.w2, Tensor::new([4, 4], eye).unwrap());
        set(&mut store, mlp.b2, Tensor::zeros([4]).unwrap());
        let mut g = Graph::new(&store);
        let v = g.input(Tensor::new([4], vec![0.5, 2.0, 0.0, 7.0]).unwrap());
        let out = mlp_apply(&mut g, v, &mlp).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, 2.0, 0.0, 7.0]);
        let bad = g.input(Tensor::zeros([3]).unwrap());
        assert!(mlp_apply(&mut g, bad, &mlp).is_err());
    }

    #[test]
    fn hidden_width_floor() {
        assert_eq!(mlp_hidden_width(64, 4), 16);
        assert_eq!(mlp_hidden_width(8, 4), 4);
    }
}
