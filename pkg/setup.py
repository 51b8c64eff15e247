from setuptools import find_packages, setup

from deltadiff import __description__, __version__

setup(
    name="deltadiff",
    version=__version__,
    description=__description__,
    packages=find_packages(exclude=["tests", "tests.*"]),
    python_requires=">=3.11",
    install_requires=[
        "numpy>=1.26",
        "scipy>=1.11",
        "pydantic>=2.5",
        "pydantic-settings>=2.1",
        "python-dotenv>=1.0",
        "click>=8.1",
        "rich>=13.7",
    ],
    entry_points={"console_scripts": ["deltadiff = deltadiff.main:main"]},
)
