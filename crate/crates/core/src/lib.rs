pub mod bench;
pub mod certify;
pub mod feedback;
pub mod matkit;
pub mod model;
pub mod odeint;
