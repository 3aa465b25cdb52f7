"""bpminer: mine sex-stratified blood-pressure statistics from biomedical
abstracts and analyze BP variation with weighted Gaussian mixtures."""

__version__ = "0.1.0"

from bpminer.ingest import (  # noqa: E402
    AbstractRecord,
    FilterStats,
    KeywordStageConfig,
    filter_corpus,
    keyword_match,
    parse_baseline_stream,
)
from bpminer.extraction import (  # noqa: E402
    ANSWER_FIELDS,
    BPExtraction,
    PromptTemplate,
    build_prompt,
    is_complete,
    parse_answer,
    render_answer,
)
from bpminer.backends import (  # noqa: E402
    BackendAnswer,
    BackendRequest,
    DecodeParams,
    MockBackend,
    RemoteBackend,
    ResponseCache,
    mock_extract,
    query_backend,
)
from bpminer.validation import (  # noqa: E402
    FieldVerdict,
    GroundingReport,
    ReviewSummary,
    ValidationConfig,
    extract_numbers,
    ground_check,
    passes_cohort_filter,
    summarize_review,
    validate_ranges,
)
from bpminer.gmm import (  # noqa: E402
    GaussianMixture,
    StudyPoint,
    fit_gmm,
    select_components,
    to_points,
)
from bpminer.density import (  # noqa: E402
    DensityGrid,
    GridAxis,
    StudyEllipse,
    density_grid,
    iso_contours,
    peak,
    study_ellipses,
)
from bpminer.pipeline import (  # noqa: E402
    AnalysisConfig,
    PipelineConfig,
    RunManifest,
    report,
    run,
)
