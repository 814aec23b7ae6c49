"""Every CLI example in the README must actually run."""

import re
import shlex
from pathlib import Path

from metastack.cli import _load_mesh, main
from metastack.service import MetaService, ServiceConfig, SubUnitService

README = Path(__file__).resolve().parent.parent / "README.md"


def readme_commands():
    text = README.read_text()
    blocks = re.findall(r"```sh\n(.*?)```", text, flags=re.S)
    commands = []
    for block in blocks:
        for line in block.splitlines():
            line = line.strip()
            if line.startswith("metastack "):
                commands.append(line)
    return commands


def test_readme_commands_execute(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    commands = readme_commands()
    assert len(commands) >= 8
    services = []
    try:
        for command in commands:
            background = command.endswith("&")
            argv = shlex.split(command.rstrip("& "))[1:]
            if argv and argv[0] == "serve":
                # the README backgrounds the mesh; bring it up in-process on
                # the ports the config names so the replay line works as is
                assert background
                config_path = argv[argv.index("--config") + 1]
                doc, meta_model, units = _load_mesh(config_path)
                meta = MetaService(
                    ServiceConfig(
                        unit_id="meta",
                        port=doc["meta"]["port"],
                        expected_units=tuple(doc["meta"]["expected_units"]),
                        marker=doc["marker"],
                    ),
                    meta_model,
                )
                meta.start()
                services.append(meta)
                for unit_id, info in units.items():
                    svc = SubUnitService(
                        ServiceConfig(
                            unit_id=unit_id,
                            port=info["port"],
                            meta_port=doc["meta"]["port"],
                            feature_order=info["features"],
                            marker=doc["marker"],
                        ),
                        info["model"],
                    )
                    svc.start()
                    services.append(svc)
                continue
            code = main(argv)
            assert code == 0, f"README command failed: {command}"
    finally:
        for svc in services:
            svc.stop()
    # the replay the README drives must have produced complete outcomes
    outcomes = (tmp_path / "out/replay/replay_outcomes.csv").read_text().splitlines()
    assert len(outcomes) == 501
    assert all(line.endswith(",0") for line in outcomes[1:])
