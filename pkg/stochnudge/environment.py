"""
Runtime checks for the numerical stack and the environment record stored in manifests.
"""
import os
import platform
import sys
from typing import Any, Dict, List, Tuple

# thread-count variables that change BLAS/FFT scheduling
THREAD_VARIABLES = ('OMP_NUM_THREADS', 'MKL_NUM_THREADS', 'OPENBLAS_NUM_THREADS')
PACKAGES = ('numpy', 'scipy', 'pandas', 'sklearn', 'tqdm')


def check_package(name: str) -> Tuple[bool, str]:
    """Check that a package imports and report its version."""
    try:
        module = __import__(name)
        return True, f"{name} {getattr(module, '__version__', 'unknown')}"
    except ImportError:
        return False, f"{name} not installed"
    except Exception as e:
        return False, f"Error importing {name}: {e}"


def check_fft_reproducibility() -> Tuple[bool, str]:
    """Check that repeated FFTs of the same data agree bitwise."""
    try:
        import numpy as np
        rng = np.random.default_rng(0)
        data = rng.standard_normal((2, 64, 64))
        first = np.fft.ifft2(np.fft.fft2(data))
        second = np.fft.ifft2(np.fft.fft2(data))
        if np.array_equal(first, second):
            return True, "repeated transforms are bitwise identical"
        return False, "repeated transforms differ; results will not be reproducible"
    except Exception as e:
        return False, f"Error checking FFT: {e}"


def check_threads() -> Tuple[bool, str]:
    """Report the thread settings; unset variables let libraries pick their own."""
    settings = [f"{name}={os.environ[name]}" for name in THREAD_VARIABLES if name in os.environ]
    cpus = os.cpu_count() or 1
    if settings:
        return True, f"{cpus} CPUs, {', '.join(settings)}"
    return True, f"{cpus} CPUs, thread counts left to the libraries"


def runtime_info() -> Dict[str, Any]:
    """Interpreter, platform, package versions and thread settings for the manifest."""
    packages = {}
    for name in PACKAGES:
        available, info = check_package(name)
        packages[name] = info.split(' ', 1)[1] if available else None
    return {
        'python': sys.version.split()[0],
        'platform': platform.platform(),
        'packages': packages,
        'threads': {name: os.environ.get(name) for name in THREAD_VARIABLES},
        'cpu_count': os.cpu_count(),
    }


def collect_diagnostics() -> List[Tuple[str, bool, str]]:
    diagnostics = []
    for name in PACKAGES:
        available, info = check_package(name)
        diagnostics.append((name, available, info))
    available, info = check_fft_reproducibility()
    diagnostics.append(("FFT", available, info))
    available, info = check_threads()
    diagnostics.append(("Threads", available, info))
    return diagnostics


def run_diagnostics() -> bool:
    """Print the environment checks; True when all of them pass."""
    print("🔍 StochNudge - Environment Diagnostics")
    print("=" * 50)
    print(f"Python {sys.version.split()[0]} on {platform.platform()}")

    diagnostics = collect_diagnostics()
    print("\nDiagnostic Results:")
    print("-" * 20)
    for name, available, info in diagnostics:
        status = "✓" if available else "✗"
        print(f"{status} {name:<20} {info}")

    success = all(available for _, available, _ in diagnostics)
    print("\n" + "=" * 50)
    if success:
        print("🎉 Environment ready")
    else:
        print("⚠️  Some checks failed; see above")
    return success
