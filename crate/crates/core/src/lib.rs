pub mod camera;
pub mod config;
pub mod init_sfm;
pub mod loop_correction;
pub mod map;
pub mod se3;
pub mod sim_world;
pub mod solver;
pub mod traj_eval;
pub mod uncertainty;
