//! The modal operator `L(j, ε)`, its eigenpairs, spectral projectors, and
//! continuation in `ε`.

pub mod continuation;
pub mod eigs;
pub mod kato;
pub mod operator;
pub mod riesz;

pub use operator::{
    apply_l, assemble_dense, assemble_dense_capped, assemble_dense_first_order, ModalOperator, ModalOperatorSpec,
    DEFAULT_DENSE_CAP,
};
pub use eigs::{
    dense_spectrum, kernel_basis_l0, leading_eigs, make_pair, modal_div_residual, normalize_eigvec, sort_spectrum, EigConfig,
    EigMethod, EigPair,
};
pub use continuation::{continue_eigpair, ContinuationConfig, ContinuationPath, ContinuationStep};
pub use kato::{kato_first_order_check, loglog_slope, KatoConfig, KatoReport, KatoRow};
pub use riesz::{projector_distance_bound, riesz_projector, Contour, DistanceBound, RieszConfig, RieszProjector};
