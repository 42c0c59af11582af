use crate::nn::{
    BatchNorm2d, Conv2d, ConvProjection, ConvTranspose2d, DepthwiseConv2d, Linear, MultiHeadAttention, PointwiseConv,
    ProjectionBranch,
};
use crate::tensor::{Real, Tensor};

/// Whether a named tensor is optimized or only tracked (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Walks every named tensor of a layer tree in a fixed order.
pub trait Visit<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! visit_fields {
    ($ty:ident; params: [$($p:ident),*]; buffers: [$($b:ident),*]; children: [$($c:ident),*]) => {
        impl<T: Real> Visit<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
                $( f(&join(prefix, stringify!($p)), ParamKind::Trainable, &self.$p); )*
                $( f(&join(prefix, stringify!($b)), ParamKind::Buffer, &self.$b); )*
                $( self.$c.visit(&join(prefix, stringify!($c)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
                $( f(&join(prefix, stringify!($p)), ParamKind::Trainable, &mut self.$p); )*
                $( f(&join(prefix, stringify!($b)), ParamKind::Buffer, &mut self.$b); )*
                $( self.$c.visit_mut(&join(prefix, stringify!($c)), f); )*
            }
        }
    };
}
pub(crate) use visit_fields;

visit_fields!(Conv2d; params: [weight, bias]; buffers: []; children: []);
visit_fields!(ConvTranspose2d; params: [weight, bias]; buffers: []; children: []);
visit_fields!(PointwiseConv; params: [weight, bias]; buffers: []; children: []);
visit_fields!(DepthwiseConv2d; params: [weight, bias]; buffers: []; children: []);
visit_fields!(Linear; params: [weight, bias]; buffers: []; children: []);
visit_fields!(BatchNorm2d; params: [scale, shift]; buffers: [running_mean, running_var]; children: []);
visit_fields!(ProjectionBranch; params: []; buffers: []; children: [depthwise, pointwise]);
visit_fields!(ConvProjection; params: []; buffers: []; children: [query, key, value]);
visit_fields!(MultiHeadAttention; params: []; buffers: []; children: [query, key, value, output]);

impl<T: Real, V: Visit<T>> Visit<T> for Vec<V> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        for (i, v) in self.iter().enumerate() {
            v.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for (i, v) in self.iter_mut().enumerate() {
            v.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Real, V: Visit<T>> Visit<T> for Option<V> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        if let Some(v) = self {
            v.visit(prefix, f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        if let Some(v) = self {
            v.visit_mut(prefix, f);
        }
    }
}
