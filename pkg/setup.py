import os

from setuptools import Extension, setup

# -ffp-contract=off keeps multiply and add as separate roundings (no FMA), which the
# fixed-order matmul contract relies on. SQTK_PORTABLE=1 drops host-specific tuning.
flags = ["-O3", "-ffp-contract=off", "-fno-fast-math"]
if os.environ.get("SQTK_PORTABLE") != "1":
    flags.append("-march=native")

setup(
    ext_modules=[
        Extension(
            "seqtrack.engine._matmul",
            sources=["src/seqtrack/engine/_matmul.c"],
            extra_compile_args=flags,
        )
    ]
)
