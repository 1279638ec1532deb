pub mod numerics;
pub mod phy;
pub mod channel;
pub mod minenergy;
pub mod policy;
pub mod sim;
