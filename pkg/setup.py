from setuptools import setup, find_packages

# Load long description from README.md
with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="gridscope",
    version="0.1.0",
    description="Model-free distribution grid state estimation by low-rank tensor completion",
    long_description=long_description,
    long_description_content_type="text/markdown",
    author="gridscope developers",
    packages=find_packages(),
    package_data={
        "gridscope": [
            "data/feeders/*",
            "data/configs/*",
        ]
    },
    include_package_data=True,
    install_requires=[
        "numpy>=1.21.0",
        "scipy>=1.7.0",
        "pandas>=1.3.0",
        "tqdm>=4.62.0",
    ],
    extras_require={
        "test": ["pytest>=7.0"],
    },
    entry_points={
        "console_scripts": [
            "gridscope=gridscope.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering",
    ],
    python_requires=">=3.8",
    keywords="power distribution state estimation tensor completion cpd parafac identifiability",
)
