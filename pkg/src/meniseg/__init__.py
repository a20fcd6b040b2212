"""meniseg: volumetric knee-MRI meniscus segmentation toolkit.

3D U-Net baseline and a promptless single-mask adaptation of a promptable 2D
ViT segmenter, with the preprocessing, training protocol, and evaluation suite
around them. Desk-scale experiments run on synthetic phantoms.
"""

__version__ = "0.1.0"

from .volume import (  # noqa: F401
    AXIS_AP,
    AXIS_LR,
    AXIS_SI,
    DEFAULT_AXES,
    BinaryMask,
    DatasetSplit,
    Volume,
    load_mask,
    load_nifti,
    load_nifti_mask,
    load_volume,
    save_mask,
    save_volume,
    split_dataset,
)
from .phantom import PhantomSpec, generate_phantom  # noqa: F401
from .preprocess import (  # noqa: F401
    CropBox,
    Image2D,
    Slice2D,
    compute_crop_box,
    crop,
    extract_slices,
    prepare_backbone_input,
    restore_slice_mask,
    stack_slices,
    window_rescale,
)
from .losses import bce_loss, combined_loss, dice_loss  # noqa: F401
from .unet3d import UNet3D, UNet3DConfig, build_unet3d, parameter_count  # noqa: F401
from .promptless import (  # noqa: F401
    PromptlessSegmenter,
    PromptlessViTConfig,
    base_config,
    build_promptless_segmenter,
    forward_2d,
    load_foundation_weights,
    predict_volume,
    set_freeze_policy,
    toy_config,
)
from .training import (  # noqa: F401
    EarlyStopping,
    TrainConfig,
    TrainingHistory,
    TRAIN_PRESETS,
    random_grid_search,
    train,
)
from .metrics import (  # noqa: F401
    BlandAltmanStats,
    CaseMetrics,
    MetricsReport,
    avg_transverse_thickness,
    bland_altman,
    connected_components,
    dice_score,
    evaluate_test_set,
    hausdorff95,
    transverse_projection,
)
