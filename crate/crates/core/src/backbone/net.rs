//! Conv3x3-BN-ReLU-MaxPool blocks, global average pooling and a linear head.

use super::layers::{self, BnCache};
use super::{BackboneSpec, ParamSet, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// A batch of images in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Batch {
    pub fn from_images(images: &[ImageTensor]) -> Result<Self> {
        let (c, h, w) = images.first().map(ImageTensor::shape).unwrap_or((0, 0, 0));
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for img in images {
            if img.shape() != (c, h, w) {
                return Err(Error::Contract(format!(
                    "mixed image shapes in batch: {:?} vs {:?}",
                    img.shape(),
                    (c, h, w)
                )));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Self {
            n: images.len(),
            c,
            h,
            w,
            data,
        })
    }

    pub fn image(&self, i: usize) -> ImageTensor {
        let len = self.c * self.h * self.w;
        ImageTensor::from_vec(self.c, self.h, self.w, self.data[i * len..(i + 1) * len].to_vec())
            .expect("batch geometry")
    }
}

/// How normalisation layers obtain their statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left untouched.
    BatchOnly,
    /// Stored running statistics.
    Eval,
}

struct BlockCache {
    input: Vec<f32>,
    bn: Option<BnCache>,
    /// Window position of each pooled maximum.
    argmax: Vec<u8>,
    h: usize,
    w: usize,
}

struct Tape {
    blocks: Vec<BlockCache>,
    final_hw: usize,
    /// Pooled output of the last block.
    output: Vec<f32>,
    features: Vec<f32>,
}

/// Output of a forward pass; holds the activations needed by
/// [`CompactNet::backward_into`] when gradients were recorded.
pub struct ForwardPass {
    pub logits: Vec<f32>,
    pub n: usize,
    tape: Option<Tape>,
    mode: NormMode,
}

impl ForwardPass {
    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]
    }
}

#[derive(Debug, Clone)]
pub struct CompactNet {
    spec: BackboneSpec,
}

fn get<'a>(set: &'a ParamSet, name: &str) -> Result<&'a [f32]> {
    set.get(name)
        .map(|t| t.data.as_slice())
        .ok_or_else(|| Error::Contract(format!("missing tensor '{name}'")))
}

fn get_mut<'a>(set: &'a mut ParamSet, name: &str) -> Result<&'a mut [f32]> {
    set.get_mut(name)
        .map(|t| t.data.as_mut_slice())
        .ok_or_else(|| Error::Contract(format!("missing tensor '{name}'")))
}

/// Moves a gradient buffer out so it can be written alongside borrowed params.
fn take(set: &mut ParamSet, name: &str) -> Result<Vec<f32>> {
    set.get_mut(name)
        .map(|t| std::mem::take(&mut t.data))
        .ok_or_else(|| Error::Contract(format!("missing gradient '{name}'")))
}

fn put(set: &mut ParamSet, name: &str, data: Vec<f32>) {
    set.get_mut(name).expect("taken from this set").data = data;
}

impl CompactNet {
    pub fn new(spec: BackboneSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = &self.spec;
        if batch.n > 0 && (batch.c, batch.h, batch.w) != (s.channels, s.height, s.width) {
            return Err(Error::Contract(format!(
                "batch images are {}x{}x{}, network expects {}x{}x{}",
                batch.c, batch.h, batch.w, s.channels, s.height, s.width
            )));
        }
        if batch.data.len() != batch.n * batch.c * batch.h * batch.w {
            return Err(Error::Contract("batch data length does not match its shape".into()));
        }
        Ok(())
    }

    /// Forward pass. With [`NormMode::Train`] the running statistics in
    /// `stats` are updated; `record` keeps activations for a backward pass.
    pub fn forward(
        &self,
        params: &ParamSet,
        stats: &mut ParamSet,
        batch: &Batch,
        mode: NormMode,
        record: bool,
    ) -> Result<ForwardPass> {
        let (pass, batch_stats) = self.forward_impl(params, stats, batch, mode, record)?;
        if mode == NormMode::Train && batch.n > 0 {
            for (i, (mean, var, count)) in batch_stats.into_iter().enumerate() {
                let b = i + 1;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let rm = get_mut(stats, &format!("bn{b}.running_mean"))?;
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * m) as f32;
                }
                let rv = get_mut(stats, &format!("bn{b}.running_var"))?;
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * v * unbias) as f32;
                }
            }
        }
        Ok(pass)
    }

    /// Eval-mode logits (`n x 2`, row-major) from stored statistics.
    pub fn forward_eval(&self, params: &ParamSet, stats: &ParamSet, batch: &Batch) -> Result<Vec<f32>> {
        Ok(self.forward_impl(params, stats, batch, NormMode::Eval, false)?.0.logits)
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        params: &ParamSet,
        stats: &ParamSet,
        batch: &Batch,
        mode: NormMode,
        record: bool,
    ) -> Result<(ForwardPass, Vec<(Vec<f64>, Vec<f64>, f64)>)> {
        self.check_batch(batch)?;
        let n = batch.n;
        let mut x = batch.data.clone();
        let (mut cin, mut h, mut w) = (self.spec.channels, self.spec.height, self.spec.width);
        let mut blocks = Vec::new();
        let mut batch_stats = Vec::new();
        for (i, &cout) in self.spec.widths.iter().enumerate() {
            let b = i + 1;
            let hw = h * w;
            let mut y = vec![0.0f32; n * cout * hw];
            layers::conv3x3_forward(
                &x,
                n,
                cin,
                h,
                w,
                get(params, &format!("conv{b}.weight"))?,
                get(params, &format!("conv{b}.bias"))?,
                cout,
                &mut y,
            );
            let gamma = get(params, &format!("bn{b}.weight"))?;
            let beta = get(params, &format!("bn{b}.bias"))?;
            let bn = match mode {
                NormMode::Eval => {
                    layers::bn_eval_forward(
                        &mut y,
                        n,
                        cout,
                        hw,
                        gamma,
                        beta,
                        get(stats, &format!("bn{b}.running_mean"))?,
                        get(stats, &format!("bn{b}.running_var"))?,
                        BN_EPS,
                    );
                    None
                }
                NormMode::Train | NormMode::BatchOnly => {
                    let (cache, mean, var) = layers::bn_train_forward(&mut y, n, cout, hw, gamma, beta, BN_EPS, record);
                    batch_stats.push((mean, var, (n * hw) as f64));
                    Some(cache)
                }
            };
            layers::relu_forward(&mut y);
            let mut argmax = Vec::new();
            let pooled = layers::maxpool2_forward(&y, n * cout, h, w, record.then_some(&mut argmax));
            if record {
                blocks.push(BlockCache {
                    input: std::mem::take(&mut x),
                    bn,
                    argmax,
                    h,
                    w,
                });
            }
            x = pooled;
            cin = cout;
            h /= 2;
            w /= 2;
        }
        let features = layers::global_avg_pool(&x, n * cin, h * w);
        let fc_w = get(params, "fc.weight")?;
        let fc_b = get(params, "fc.bias")?;
        let mut logits = vec![0.0f32; n * NUM_CLASSES];
        layers::gemm(n, cin, NUM_CLASSES, &features, false, fc_w, true, 0.0, &mut logits);
        for row in logits.chunks_exact_mut(NUM_CLASSES) {
            row.iter_mut().zip(fc_b).for_each(|(l, b)| *l += b);
        }
        if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logit {bad} of forward pass")));
        }
        let tape = record.then(|| Tape {
            blocks,
            final_hw: h * w,
            output: x,
            features,
        });
        Ok((
            ForwardPass {
                logits,
                n,
                tape,
                mode,
            },
            batch_stats,
        ))
    }

    /// Adds `d loss / d params` to `grads`, given `dlogits = d loss / d logits`.
    pub fn backward_into(
        &self,
        params: &ParamSet,
        pass: &ForwardPass,
        dlogits: &[f32],
        grads: &mut ParamSet,
    ) -> Result<()> {
        let tape = pass
            .tape
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called on a forward pass that did not record gradients".into()))?;
        if dlogits.len() != pass.logits.len() {
            return Err(Error::Contract(format!(
                "dlogits has {} entries, logits {}",
                dlogits.len(),
                pass.logits.len()
            )));
        }
        let n = pass.n;
        let c_last = self.spec.feature_width();
        let fc_w = get(params, "fc.weight")?;
        layers::gemm(
            NUM_CLASSES,
            n,
            c_last,
            dlogits,
            true,
            &tape.features,
            false,
            1.0,
            get_mut(grads, "fc.weight")?,
        );
        {
            let db = get_mut(grads, "fc.bias")?;
            for row in dlogits.chunks_exact(NUM_CLASSES) {
                db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
        }
        let mut dfeat = vec![0.0f32; n * c_last];
        layers::gemm(n, NUM_CLASSES, c_last, dlogits, false, fc_w, false, 0.0, &mut dfeat);

        let hw = tape.final_hw;
        let mut dx: Vec<f32> = dfeat
            .iter()
            .flat_map(|&d| std::iter::repeat(d / hw as f32).take(hw))
            .collect();

        for (i, block) in tape.blocks.iter().enumerate().rev() {
            let b = i + 1;
            let cout = self.spec.widths[i];
            let cin = if i == 0 { self.spec.channels } else { self.spec.widths[i - 1] };
            let (h, w) = (block.h, block.w);
            let pooled = tape.blocks.get(i + 1).map_or(&tape.output, |next| &next.input);
            let mut dact = vec![0.0f32; n * cout * h * w];
            layers::maxpool2_relu_backward(&dx, pooled, &block.argmax, n * cout, h, w, &mut dact);
            let gamma = get(params, &format!("bn{b}.weight"))?;
            let cache = block
                .bn
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("backward through eval-mode normalisation ({:?})", pass.mode)))?;
            let mut dgamma = take(grads, &format!("bn{b}.weight"))?;
            let mut dbeta = take(grads, &format!("bn{b}.bias"))?;
            layers::bn_backward(&mut dact, n, cout, h * w, gamma, cache, &mut dgamma, &mut dbeta);
            put(grads, &format!("bn{b}.weight"), dgamma);
            put(grads, &format!("bn{b}.bias"), dbeta);

            let weight = get(params, &format!("conv{b}.weight"))?;
            let mut dw = take(grads, &format!("conv{b}.weight"))?;
            let mut db = take(grads, &format!("conv{b}.bias"))?;
            let mut dinput = if i > 0 { vec![0.0f32; n * cin * h * w] } else { Vec::new() };
            layers::conv3x3_backward(
                &block.input,
                n,
                cin,
                h,
                w,
                weight,
                cout,
                &dact,
                &mut dw,
                &mut db,
                (i > 0).then_some(dinput.as_mut_slice()),
            );
            put(grads, &format!("conv{b}.weight"), dw);
            put(grads, &format!("conv{b}.bias"), db);
            dx = dinput;
        }
        Ok(())
    }
}
