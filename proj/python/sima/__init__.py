"""Python front end for the sandbox core."""

import json

from ._sima import (  # noqa: F401
    CHUNK_LEN,
    PROTOCOL_VERSION,
    STEP_WIDTH,
    ConfigError,
    DecodeError,
    Error,
    ProtocolError,
    SpecError,
    aggregate_judgments,
    cfg_combine,
    encode_hello,
    encode_instruction,
    encode_interrupt,
    encode_reset,
    initial_frame,
    parse_annotations,
    permutation_test,
    replay,
    run_expert,
    split_frames,
    success_rate,
    trajectory_info,
)
from ._sima import tasks_jsonl as _tasks_jsonl


def tasks(world=None):
    """Registry tasks as dicts, optionally for one world."""
    return [json.loads(line) for line in _tasks_jsonl(world)]
