from setuptools import setup, find_packages

setup(
    name="pmam-lab",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    py_modules=["pmam"],
    description="Prototype-based masked audio model pretraining for sound event detection",
    python_requires=">=3.10",
    install_requires=[
        "joblib>=1.5.1",
        "numpy>=2.1.3",
        "pandas>=2.3.1",
        "python-dotenv>=1.1.1",
        "pyyaml>=6.0.2",
        "safetensors>=0.5.3",
        "scikit-learn>=1.7.0",
        "scipy>=1.15.3",
        "torch>=2.7.1",
    ],
    extras_require={"dev": ["pytest>=8.4.1"]},
    entry_points={"console_scripts": ["pmam=pmam:main"]},
)
