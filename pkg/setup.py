"""
Setup script for the lesion classification pipeline.
"""

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="lesion-pipeline",
    version="1.0.0",
    description="Dermoscopy lesion classification: split, augment, fine-tune, ensemble and evaluate",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "augmentation",
        "config",
        "dataset",
        "db",
        "ensemble",
        "errors",
        "experiments",
        "main",
        "metrics",
        "models",
        "report_generator",
        "synthetic",
        "training",
        "utils",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Image Recognition",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest",
            "scikit-learn",
        ],
    },
    entry_points={
        "console_scripts": [
            "lesion-pipeline=main:main",
        ],
    },
    include_package_data=True,
    zip_safe=False,
)
