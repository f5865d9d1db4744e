from setuptools import find_packages, setup


def get_version_and_docstring():
    ns = {"__doc__": "", "__version__": ""}
    doc_status = 0  # Not started, in progress, done
    for line in open("pybmc/__init__.py").readlines():
        if line.startswith("__version__"):
            exec(line.strip(), ns, ns)
        elif line.startswith('"""'):
            if doc_status == 0:
                doc_status = 1
                line = line.lstrip('"')
            elif doc_status == 1:
                doc_status = 2
        if doc_status == 1:
            ns["__doc__"] += line.rstrip() + "\n"
    return ns["__version__"], ns["__doc__"]


version, doc = get_version_and_docstring()

setup(
    name="pybmc",
    version=version,
    description="Balance memory and compute when growing a transformer KV cache.",
    long_description=doc,
    long_description_content_type="text/markdown",
    packages=find_packages(
        exclude=["tests", "tests.*", "examples_py", "examples_py.*"]
    ),
    python_requires=">=3.7.0",
    install_requires=["numpy>=1.17"],
    extras_require={"tests": ["pytest"]},
    entry_points={"console_scripts": ["pybmc = pybmc.cli:main"]},
    zip_safe=True,
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: BSD License",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
)
