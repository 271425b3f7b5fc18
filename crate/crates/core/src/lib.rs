pub mod gradcore;
pub mod seed;
pub mod sigkit;
pub mod cvnet;
pub mod losses;
pub mod evalkit;
pub mod trainer;
