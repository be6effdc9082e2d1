import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="intrinsic-ldm",
    version="0.1.0dev",
    author="ILDM Team",
    description="Joint image and intrinsic latent diffusion at desk scale",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        "numpy",
        "scipy",
        "pandas",
        "torch",
        "click",
        "pyyaml",
        "tqdm",
        "matplotlib",
        "imageio",
    ],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["ildm=ildm.main:cli"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Programming Language :: Python :: 3.8"
    ],
    python_requires='>=3.8',
)
