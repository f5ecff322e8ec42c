import setuptools


setuptools.setup(
    name='axisforge',
    version='0.1.0',
    license='http://www.apache.org/licenses/LICENSE-2.0',
    description='Tri-axis guided diffusion and cube-corner back-projection for 6D pose',
    packages=setuptools.find_packages(".", exclude=["tests", "samples"]),
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.21",
        "scipy>=1.7",
        "sqlblock>=0.6.5",
        "Pillow>=8.0",
        "tqdm>=4.60",
    ],
    extras_require={
        "test": ["pytest>=7.0"],
    },
    entry_points={
        "console_scripts": [
            "axisforge=axisforge.cli:main",
        ],
    },
    classifiers=[
        "Development Status :: 2 - Pre-Alpha",
        "Intended Audience :: Science/Research",
        'License :: OSI Approved :: Apache Software License',
        "Operating System :: Unix",
        "Operating System :: POSIX",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: Implementation :: CPython",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
)
