"""Build the semdet_py extension by delegating to cargo.

setuptools-rust would normally own this; building through a plain
build_ext subclass keeps the only build requirements cargo and
setuptools itself.
"""

import json
import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

CRATE_DIR = Path(__file__).resolve().parent


def target_dir() -> Path:
    meta = subprocess.run(
        ["cargo", "metadata", "--format-version", "1", "--no-deps"],
        cwd=CRATE_DIR,
        check=True,
        capture_output=True,
    )
    return Path(json.loads(meta.stdout)["target_directory"])


class CargoExtension(Extension):
    def __init__(self, name: str):
        super().__init__(name, sources=[])


class CargoBuildExt(build_ext):
    def build_extension(self, ext: CargoExtension) -> None:
        subprocess.run(
            ["cargo", "build", "--release", "-p", "semdet-py"],
            cwd=CRATE_DIR,
            check=True,
        )
        release = target_dir() / "release"
        for candidate in (f"lib{ext.name}.so", f"lib{ext.name}.dylib", f"{ext.name}.dll"):
            built = release / candidate
            if built.exists():
                break
        else:
            raise FileNotFoundError(f"cargo produced no cdylib for {ext.name} in {release}")
        out = Path(self.get_ext_fullpath(ext.name))
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, out)


setup(
    ext_modules=[CargoExtension("semdet_py")],
    cmdclass={"build_ext": CargoBuildExt},
    zip_safe=False,
)
