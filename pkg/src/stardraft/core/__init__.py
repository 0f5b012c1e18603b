"""Token models, draft trees, verification and reference decoders."""

from .decode import (
    DecodeResult,
    DecodeSession,
    append_continuation,
    autoregressive_decode,
    speculative_decode,
)
from .models import (
    START,
    CategoricalModel,
    ModelError,
    all_contexts,
    derive_draft,
    load_model,
    make_model,
    save_model,
)
from .rng import SeededRng, session_rng
from .tree import ROOT, DraftTree, TreeNode, build_draft_tree, top_k
from .verify import AcceptOutcome, acceptance_beta, residual, verify_path, verify_tree

__all__ = [
    "AcceptOutcome",
    "CategoricalModel",
    "DecodeResult",
    "DecodeSession",
    "DraftTree",
    "ModelError",
    "ROOT",
    "START",
    "SeededRng",
    "TreeNode",
    "acceptance_beta",
    "all_contexts",
    "append_continuation",
    "autoregressive_decode",
    "build_draft_tree",
    "derive_draft",
    "load_model",
    "make_model",
    "residual",
    "save_model",
    "session_rng",
    "speculative_decode",
    "top_k",
    "verify_path",
    "verify_tree",
]
