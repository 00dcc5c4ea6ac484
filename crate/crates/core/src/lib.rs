pub mod geom;
pub mod solvers;
pub mod autodiff;
pub mod robust;
pub mod losses;
pub mod regressor;
pub mod sim;
pub mod store;
pub mod cli;
