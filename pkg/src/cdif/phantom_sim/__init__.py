from .cdif_io import read_slice, write_slice
from .dataset import Dataset, make_dataset, simulate_slice
from .noise import NoiseModel, dose_degrade
from .phantom import Phantom, generate_phantom
from .tomo import Geometry, Sinogram, fbp_reconstruct, forward_project, hu_to_mu, mu_to_hu
