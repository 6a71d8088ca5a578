"""Download the four uncompressed MNIST IDX files into a directory.

The files are taken from the ``MNIST-dir`` wheel on PyPI, which ships them
unmodified; each file is checked against its known SHA-256 before it is
written. Usage: ``python scripts/fetch_mnist.py [DEST]`` (default
``data/mnist``).
"""
import hashlib
import io
import json
import os
import sys
import urllib.request
import zipfile

INDEX = "https://pypi.org/pypi/MNIST-dir/json"
WHEEL = "MNIST_dir-0.2-py3-none-any.whl"

SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def wheel_url():
    with urllib.request.urlopen(INDEX, timeout=60) as resp:
        meta = json.load(resp)
    for entry in meta["urls"]:
        if entry["filename"] == WHEEL:
            return entry["url"]
    raise RuntimeError(f"{WHEEL} is not listed on PyPI")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    dest = argv[0] if argv else os.path.join("data", "mnist")
    if all(os.path.exists(os.path.join(dest, name)) for name in SHA256):
        print(f"{dest} already holds the MNIST files")
        return 0
    url = wheel_url()
    print(f"downloading {url}")
    with urllib.request.urlopen(url, timeout=300) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    os.makedirs(dest, exist_ok=True)
    members = {os.path.basename(n): n for n in archive.namelist()
               if "__MACOSX" not in n and n.endswith("ubyte")}
    for name, digest in SHA256.items():
        # the wheel spells the names with a dot before "idx"
        data = archive.read(members[name.replace("-idx", ".idx")])
        if hashlib.sha256(data).hexdigest() != digest:
            raise RuntimeError(f"checksum mismatch for {name}")
        with open(os.path.join(dest, name), "wb") as f:
            f.write(data)
        print(f"wrote {os.path.join(dest, name)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
