import argparse
import sys
from pathlib import Path

from .backbones import REGISTRY, BackboneUnavailable
from .export import export_features
from .fmap import FmapError, validate_fmap


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="featexport", description="export backbone features as FMAP files"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run a backbone over all scene frames")
    p.add_argument("--scene", required=True, help="scene directory with manifest.json")
    p.add_argument("--backbone", choices=sorted(REGISTRY), default="dino_vits8")
    p.add_argument("--out", help="output directory (default: <scene>/features_<name>)")
    p.add_argument("--no-manifest-update", action="store_true")

    v = sub.add_parser("validate", help="check FMAP files against the format")
    v.add_argument("files", nargs="+")

    args = parser.parse_args(argv)
    if args.command == "export":
        manifest = Path(args.scene) / "manifest.json"
        try:
            written = export_features(
                manifest, args.backbone, args.out,
                update_manifest=not args.no_manifest_update,
            )
        except BackboneUnavailable as e:
            print(f"error: {e}", file=sys.stderr)
            return 2
        print(f"wrote {len(written)} feature maps")
        return 0

    status = 0
    for f in args.files:
        try:
            info = validate_fmap(f)
            print(f"{f}: ok ({info['height']}x{info['width']}x{info['dim']})")
        except (FmapError, OSError) as e:
            print(f"{f}: INVALID ({e})")
            status = 1
    return status


if __name__ == "__main__":
    sys.exit(main())
