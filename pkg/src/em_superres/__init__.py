from em_superres.models import (
    ALL_ANGLES,
    Angle,
    Dictionary,
    DictionaryProvenance,
    FoldDetectConfig,
    FoldMask,
    LambdaSweepResult,
    LearnConfig,
    Membrane,
    MetricReport,
    NoiseSpec,
    PatchBatch,
    PatchSpec,
    PhantomSpec,
    ProjectionModel,
    ReconConfig,
    ReconReport,
    ReconstructionResult,
    SolverConfig,
    SparseCode,
    TiltGeometry,
    TiltViewSet,
    Volume3D,
)
from em_superres.volume import (
    center_patches,
    extract_patches,
    import_stack,
    patch_origins,
    read_volume,
    recompose_average,
    rescale_unit,
    write_volume,
)
from em_superres.solver import lasso_solve, lasso_solve_batch
from em_superres.dictionary import (
    encode,
    learn_dictionary,
    load_dictionary,
    representation_stats,
    save_dictionary,
    update_dictionary_step,
)
from em_superres.tomography import (
    add_noise,
    build_projection_model,
    gather_patch_measurements,
    load_views,
    save_views,
    simulate_views,
)
from em_superres.reconstruction import (
    apply_folds,
    detect_folds,
    detect_section_folds,
    inpaint,
    load_fold_mask,
    mark_lost_sections,
    reconstruct,
    reconstruct_volume,
    save_fold_mask,
)
from em_superres.evaluation import (
    backproject,
    cubic_z_interpolate,
    evaluate,
    gradient_metrics,
    normalized_dot,
    render_xz_slice,
    save_xz_png,
    section_replicate,
    sweep_lambda,
)
from em_superres.phantom import draw_membranes, generate_phantom
from em_superres.settings import Settings

__version__ = "0.1.0"

__all__ = [
    "ALL_ANGLES",
    "Angle",
    "Dictionary",
    "DictionaryProvenance",
    "FoldDetectConfig",
    "FoldMask",
    "LambdaSweepResult",
    "LearnConfig",
    "Membrane",
    "MetricReport",
    "NoiseSpec",
    "PatchBatch",
    "PatchSpec",
    "PhantomSpec",
    "ProjectionModel",
    "ReconConfig",
    "ReconReport",
    "ReconstructionResult",
    "Settings",
    "SolverConfig",
    "SparseCode",
    "TiltGeometry",
    "TiltViewSet",
    "Volume3D",
    "add_noise",
    "apply_folds",
    "backproject",
    "build_projection_model",
    "center_patches",
    "cubic_z_interpolate",
    "detect_folds",
    "detect_section_folds",
    "draw_membranes",
    "encode",
    "evaluate",
    "extract_patches",
    "gather_patch_measurements",
    "generate_phantom",
    "gradient_metrics",
    "import_stack",
    "inpaint",
    "lasso_solve",
    "lasso_solve_batch",
    "learn_dictionary",
    "load_dictionary",
    "load_fold_mask",
    "load_views",
    "mark_lost_sections",
    "normalized_dot",
    "patch_origins",
    "read_volume",
    "recompose_average",
    "reconstruct",
    "reconstruct_volume",
    "render_xz_slice",
    "representation_stats",
    "rescale_unit",
    "save_dictionary",
    "save_fold_mask",
    "save_views",
    "save_xz_png",
    "section_replicate",
    "simulate_views",
    "sweep_lambda",
    "update_dictionary_step",
    "write_volume",
]
