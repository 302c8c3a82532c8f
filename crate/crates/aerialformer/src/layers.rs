//! Parameterized layer wrappers over the raw tensor ops.

use rand::Rng;

use crate::error::{AfError, Result};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone)]
pub struct Conv2dLayer {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl Conv2dLayer {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.register(
            &format!("{}.weight", self.prefix),
            vec![self.out_ch, self.in_ch, self.kernel, self.kernel],
            Init::TruncNormal(0.02),
            true,
            true,
            rng,
        );
        if self.bias {
            store.register(
                &format!("{}.bias", self.prefix),
                vec![self.out_ch],
                Init::Zeros,
                true,
                false,
                rng,
            );
        }
    }

    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        x: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let w = binder.get(store, &format!("{}.weight", self.prefix));
        let b = self
            .bias
            .then(|| binder.get(store, &format!("{}.bias", self.prefix)));
        x.conv2d(w, b, self.stride, self.padding, self.dilation)
    }

    pub fn params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias { self.out_ch } else { 0 }
    }
}

/// Transposed convolution sized for exact 2× spatial upsampling
/// (2×2 kernel, stride 2).
#[derive(Clone)]
pub struct Deconv2dLayer {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Deconv2dLayer {
    pub const KERNEL: usize = 2;
    pub const STRIDE: usize = 2;

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        store.register(
            &format!("{}.weight", self.prefix),
            vec![self.in_ch, self.out_ch, Self::KERNEL, Self::KERNEL],
            Init::TruncNormal(0.02),
            true,
            true,
            rng,
        );
        store.register(
            &format!("{}.bias", self.prefix),
            vec![self.out_ch],
            Init::Zeros,
            true,
            false,
            rng,
        );
    }

    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        x: Tensor<'t>,
    ) -> Result<Tensor<'t>> {
        let shape = x.shape();
        let w = binder.get(store, &format!("{}.weight", self.prefix));
        let b = binder.get(store, &format!("{}.bias", self.prefix));
        let out = x.conv_transpose2d(w, Some(b), Self::STRIDE)?;
        let os = out.shape();
        if os[2] != 2 * shape[2] || os[3] != 2 * shape[3] {
            return Err(AfError::Geometry {
                op: "deconv",
                msg: format!(
                    "expected exact 2x upsampling, got {}x{} from {}x{}",
                    os[2], os[3], shape[2], shape[3]
                ),
            });
        }
        Ok(out)
    }
}

#[derive(Clone)]
pub struct BatchNorm2d {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.channels;
        store.register(
            &format!("{}.gamma", self.prefix),
            vec![c],
            Init::Ones,
            true,
            false,
            rng,
        );
        store.register(
            &format!("{}.beta", self.prefix),
            vec![c],
            Init::Zeros,
            true,
            false,
            rng,
        );
        store.register(
            &format!("{}.running_mean", self.prefix),
            vec![c],
            Init::Zeros,
            false,
            false,
            rng,
        );
        store.register(
            &format!("{}.running_var", self.prefix),
            vec![c],
            Init::Ones,
            false,
            false,
            rng,
        );
        // number of training batches folded into the running statistics
        store.register(
            &format!("{}.count", self.prefix),
            vec![1],
            Init::Zeros,
            false,
            false,
            rng,
        );
    }

    pub fn forward<'t>(
        &self,
        binder: &Binder<'t>,
        store: &ParamStore,
        x: Tensor<'t>,
        train: bool,
    ) -> Result<Tensor<'t>> {
        let gamma = binder.get(store, &format!("{}.gamma", self.prefix));
        let beta = binder.get(store, &format!("{}.beta", self.prefix));
        if train {
            let (out, mean, var) = x.batch_norm_train(gamma, beta, BN_EPS)?;
            let rm_path = format!("{}.running_mean", self.prefix);
            let rv_path = format!("{}.running_var", self.prefix);
            let cnt_path = format!("{}.count", self.prefix);
            let rm: Vec<f64> = store
                .get(&rm_path)
                .data
                .borrow()
                .iter()
                .zip(mean.iter())
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect();
            let rv: Vec<f64> = store
                .get(&rv_path)
                .data
                .borrow()
                .iter()
                .zip(var.iter())
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v)
                .collect();
            store.set_data(&rm_path, rm);
            store.set_data(&rv_path, rv);
            let cnt = store.get(&cnt_path).data.borrow()[0] + 1.0;
            store.set_data(&cnt_path, vec![cnt]);
            Ok(out)
        } else {
            let cnt = store.get(&format!("{}.count", self.prefix)).data.borrow()[0];
            if cnt < 1.0 {
                return Err(AfError::UninitializedStats(self.prefix.clone()));
            }
            let rm = store
                .get(&format!("{}.running_mean", self.prefix))
                .data
                .borrow()
                .clone();
            let rv = store
                .get(&format!("{}.running_var", self.prefix))
                .data
                .borrow()
                .clone();
            x.batch_norm_eval(gamma, beta, &rm, &rv, BN_EPS)
        }
    }
}
