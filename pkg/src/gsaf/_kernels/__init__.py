"""Backend selection for the LSTM recurrence kernels.

The compiled extension is preferred when present; the numpy twin is the
fallback. Set GSAF_BACKEND=python (or =c) to force a backend at import time.
"""

import os

_requested = os.environ.get("GSAF_BACKEND", "").strip().lower()

if _requested == "python":
    from . import _lstm_py as _impl

    BACKEND = "python"
elif _requested == "c":
    from . import _lstm_c as _impl  # raises ImportError if not built

    BACKEND = "c"
elif _requested == "":
    try:
        from . import _lstm_c as _impl

        BACKEND = "c"
    except ImportError:
        from . import _lstm_py as _impl

        BACKEND = "python"
else:
    raise ImportError(f"unknown GSAF_BACKEND value: {_requested!r}")

lstm_seq_forward = _impl.lstm_seq_forward
lstm_seq_backward = _impl.lstm_seq_backward
