"""Neural surface reconstruction from ray patches.

Fits a signed-distance field plus radiance to posed images by rendering
small pixel patches ("bundles") instead of independent rays, supervising
their means, variances, and edge responses alongside the usual per-pixel
color term.
"""

from . import autodiff
from .autodiff import Graph, Tensor
from .fields import (AnalyticField, AnalyticShape, EncodingConfig,
                     FieldConfig, FieldParams, init_fields, sine_texture)
from .geometry import BundleSchedule, Camera, Ray, RayBundle, build_bundles
from .losses import (LossBreakdown, LossWeights, color_loss, conv_loss,
                     eikonal_loss, mask_loss, mean_loss, total_loss,
                     variance_loss)
from .render import (DensityConfig, SampleSet, TraceConfig, render_view,
                     sphere_trace, stratified_samples, volume_render)
from .scene import (EvalReport, SceneDataset, TriangleMesh, View, chamfer,
                    load_scene, marching_cubes, psnr, read_mesh, save_scene,
                    synth_scene, write_mesh)
from .trainer import (TrainConfig, TrainState, TrainingDiverged,
                      checkpoint_load, checkpoint_save, init_state, train,
                      train_step)

__version__ = "0.1.0"
