//! Named-parameter plumbing shared by the backbone and the adapters.
//!
//! Parameter groups are generic over their leaf type so the same struct
//! holds stored [`Tensor`]s and, during a forward pass, the tape
//! [`Var`](crate::tape::Var)s bound to them.

/// Declares a parameter group with `map`, `visit` and `visit_mut`, all of
/// which walk the fields in declaration order under `prefix.field`.
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        pub struct $name:ident { $( $(#[$fmeta:meta])* pub $field:ident ),+ $(,)? }
    ) => {
        $(#[$meta])*
        pub struct $name<T = $crate::tensor::Tensor> {
            $( $(#[$fmeta])* pub $field: T, )+
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name { $( $field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field), )+ }
            }

            pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
                $( f(&format!("{prefix}.{}", stringify!($field)), &self.$field); )+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
                $( f(&format!("{prefix}.{}", stringify!($field)), &mut self.$field); )+
            }
        }
    };
}

pub(crate) use param_group;
