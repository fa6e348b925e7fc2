//! Classical dose pipeline: decay map ⊛ dose-voxel kernel, energy-to-dose conversion,
//! and synthetic kernel data.

pub mod conv3d;
pub mod dataset;
pub mod physics;

pub use conv3d::{convolve3d, convolve3d_direct, convolve3d_fft, ConvMethod};
pub use dataset::{generate_dataset, Dataset, GenerateConfig, Sample, Split, SplitNorm};
pub use physics::{
    energy_to_dose, region_mean_dose, synth_dvk_oracle, synth_energy, voxel_mass_kg, OracleParams, TissueClass,
    DEFAULT_EDGE_MM, MC_MEDIUM_DENSITY, MEV_TO_J, SOFT_TISSUE_DENSITY,
};
