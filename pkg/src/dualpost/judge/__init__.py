"""Judge prompts, backends and the concurrent gateway."""
from .gateway import (
    JUDGE_KEY_ENV,
    ChatCompletionBackend,
    JudgeBackend,
    JudgeError,
    JudgeGateway,
    JudgeVerdict,
    MockBackend,
    ReplayBackend,
    ScoreRangeError,
    TransportError,
    VerdictParseError,
    judge,
    make_backend,
    parse_verdict,
)
from .prompts import (
    MAX_FRAMES,
    ExemplarSummary,
    JudgeRequest,
    Prompt,
    PromptError,
    Template,
    build_prompt,
    subsample_frames,
)
