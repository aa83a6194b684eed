from setuptools import setup, find_packages

setup(
    name="StochNudge",
    version="0.1.0",
    packages=find_packages(exclude=["configs"]),
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "pandas>=1.5.0",
        "scikit-learn>=1.2.0",
        "tqdm>=4.65.0"
    ],
    extras_require={
        'tests': ["pytest>=7.0"],
    },
    entry_points={
        'console_scripts': [
            'stochnudge=stochnudge.cli:main',
        ],
    },
    author="",
    description="Nudging data assimilation for 2D periodic Navier-Stokes with noisy observations",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    python_requires=">=3.8",
)
