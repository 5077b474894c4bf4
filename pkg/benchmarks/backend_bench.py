"""Compare the compiled LSTM kernels against the pure-numpy fallback.

Micro-benchmarks time the recurrence kernels directly; the end-to-end
benchmark times a full adaptation iteration in a subprocess per backend
(backend selection happens at import time via GSAF_BACKEND).

Run:  python3 benchmarks/backend_bench.py
"""

import os
import subprocess
import sys
import time
import timeit

import numpy as np

from gsaf._kernels import _lstm_py

try:
    from gsaf._kernels import _lstm_c
except ImportError:
    _lstm_c = None

SHAPES = [
    # (batch, hidden, seq_len)  roughly: gradcheck-tiny, benchmark, default model
    (2, 2, 4),
    (10, 8, 30),
    (10, 16, 70),
    (32, 16, 70),
]

END_TO_END = r"""
import time
import numpy as np
from gsaf import kernel_backend
from gsaf.adapt import AdaptConfig, DomainDataset, run_adaptation
from gsaf.datakit import GeneratorSpec, generate, make_split
from gsaf.harness import split_sequences
from gsaf.model import ModelConfig

spec = GeneratorSpec(num_domains=3, videos_per_domain=24, shift_strength=0.5,
                     vocab_size=60, n=30, d_face=8, d_bg=8, d_audio=10,
                     min_words=10, max_words=30, seed=0)
domains = generate(spec)
cfg = ModelConfig(d_face=8, d_bg=8, d_audio=10, vocab_size=60, d_text=8, h=8,
                  d_k=8, d_z=4, mlp_hidden=16, n=30)
target = domains[0]
plan = make_split(target, shots=6, seed=0)
shots, val, test = split_sequences(target, plan)
adapt = AdaptConfig(shots=6, alpha=0.02, iterations=8, optimizer="adamw",
                    batch_size=8, seed=0)
t0 = time.time()
run_adaptation(domains[1:], DomainDataset(0, shots), cfg, adapt, validation=val)
dt = time.time() - t0
print(f"{kernel_backend} backend: {adapt.iterations} adaptation iterations "
      f"in {dt:.2f}s ({dt / adapt.iterations * 1000:.0f} ms/iter)")
"""


def micro(impl, B, h, n, repeats=30):
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((B, 4 * h, n))
    wh = rng.standard_normal((4 * h, h)) * 0.2
    bias = np.zeros(4 * h)
    lens = np.full(B, n, dtype=np.intp)

    fwd = lambda: impl.lstm_seq_forward(xp, wh, bias, lens, False)
    hs, gates, cs = fwd()
    dh = rng.standard_normal((B, h, n))
    bwd = lambda: impl.lstm_seq_backward(dh, wh, hs, gates, cs, lens, False)

    t_fwd = min(timeit.repeat(fwd, number=repeats, repeat=3)) / repeats
    t_bwd = min(timeit.repeat(bwd, number=repeats, repeat=3)) / repeats
    return t_fwd, t_bwd


def main():
    print("LSTM recurrence kernels, forward/backward time per call")
    print(f"{'shape (B,h,n)':>16} {'numpy fwd':>12} {'numpy bwd':>12}", end="")
    if _lstm_c is not None:
        print(f" {'c fwd':>12} {'c bwd':>12} {'speedup':>9}")
    else:
        print("   (compiled kernel not built)")
    for B, h, n in SHAPES:
        py_f, py_b = micro(_lstm_py, B, h, n)
        line = f"{f'({B},{h},{n})':>16} {py_f * 1e6:>10.0f}us {py_b * 1e6:>10.0f}us"
        if _lstm_c is not None:
            c_f, c_b = micro(_lstm_c, B, h, n)
            speed = (py_f + py_b) / (c_f + c_b)
            line += f" {c_f * 1e6:>10.0f}us {c_b * 1e6:>10.0f}us {speed:>8.1f}x"
        print(line)

    print("\nEnd-to-end adaptation iteration (subprocess per backend):")
    sys.stdout.flush()
    backends = ["python"] + (["c"] if _lstm_c is not None else [])
    for backend in backends:
        env = dict(os.environ, GSAF_BACKEND=backend)
        subprocess.run([sys.executable, "-c", END_TO_END], env=env, check=True)


if __name__ == "__main__":
    main()
