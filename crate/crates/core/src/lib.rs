pub mod atline;
pub mod descent;
pub mod dispersive;
pub mod gauss;
pub mod model;
pub mod pde;
pub mod scan;
pub mod variational;
pub mod special;
