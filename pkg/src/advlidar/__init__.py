"""Black-box adversarial perturbation search for LiDAR object detection.

The pipeline: place a handful of candidate points near a target object,
turn them into small printable spheres, re-scan the scene with a simulated
LiDAR, hand the merged cloud to a detector oracle, and let a hybrid
genetic/simulated-annealing optimizer drive the points until the detector
misses or mislabels the object. Robustness sweeps, a random-point-removal
defense, and adversarial-dataset emission round out the toolkit.
"""

from .defense import SrsConfig, adversarial_cloud, emit_adv_training_set, srs_filter
from .errors import (
    AdvLidarError,
    BudgetExhaustedError,
    ConfigError,
    MalformedFileError,
    ProtocolError,
    TransportError,
)
from .gsa import (
    AttackConfig,
    AttackResult,
    Chromosome,
    EvalBudget,
    Individual,
    Temperature,
    adaptive_pc,
    adaptive_pm,
    anneal,
    crossover,
    decode,
    elite_update,
    encode,
    evaluate,
    fitness_from_verdict,
    init_population,
    make_individual,
    mutate,
    repair,
    roulette_select,
    run_attack,
    scan_and_classify,
)
from .harness import (
    Report,
    ReportRow,
    SweepSpec,
    compute_asr,
    summarize_attacks,
    sweep_angle,
    sweep_distance,
    sweep_srs,
)
from .oracle import (
    Detection,
    DetectorInfo,
    OracleVerdict,
    ToyVoxelDetector,
    VerdictCase,
    attack_success,
    builtin_oracle,
    check_conformance,
    check_structural,
    class_templates,
    classify_verdict,
    connect_oracle,
    toy_voxel_detector,
)
from .pointcloud import (
    BoundingBox,
    Point3,
    PointCloud,
    Scene,
    chamfer_to_target,
    load_kitti_bin,
    load_scene,
    mean_pairwise_distance,
    merge,
    rotate_z,
    rotation_z,
    save_kitti_bin,
    save_scene,
    translate,
)
from .scanner import (
    ScanConfig,
    TriangleMesh,
    build_perturbation_mesh,
    default_scan_config,
    export_stl,
    icosphere,
    load_scan_config,
    load_stl,
    ray_triangle_intersect,
    simulate_scan,
)

__version__ = "0.1.0"
