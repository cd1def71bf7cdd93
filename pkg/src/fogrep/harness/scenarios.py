"""Scripted fog application scenarios with checked postconditions.

Each scenario is a function ``(cluster, params) -> ScenarioReport`` plus a
default cluster spec. A scenario raises :class:`ScenarioAssertionFailed`
at the first violated postcondition.
"""

from __future__ import annotations

import random
from collections.abc import Callable

from ..codec import decode, encode
from ..crypto import SealedRecord, open_record
from ..errors import AuthenticationFailed, ScenarioAssertionFailed, SpecInvalid, UnknownSecretVersion
from ..model import UpdateMessage, as_keygroup
from ..client import on_movement
from .cluster import Cluster
from .measure import measure_staleness
from .report import ScenarioReport
from .spec import parse_duration

Scenario = Callable[[Cluster, dict], ScenarioReport]


class _Checker:
    def __init__(self, report: ScenarioReport) -> None:
        self.report = report

    def __call__(self, ok: bool, text: str) -> None:
        self.report.checks.append((text, bool(ok)))
        if not ok:
            exc = ScenarioAssertionFailed(f"{self.report.name}: {text}")
            exc.report = self.report
            raise exc


def _report(name: str, cluster: Cluster) -> tuple[ScenarioReport, _Checker]:
    r = ScenarioReport(name, cluster.spec.seed)
    return r, _Checker(r)


def _finish(report: ScenarioReport, cluster: Cluster) -> ScenarioReport:
    report.loss = cluster.loss_report()
    report.trace_digest = cluster.bus.trace_digest()
    return report


def _int(params: dict, key: str, default: int) -> int:
    return int(params.get(key, default))


def _dur(params: dict, key: str, default: str) -> float:
    return parse_duration(params.get(key, default))


def _no_loss(cluster: Cluster, check: _Checker) -> None:
    lost = sum(row[5] for row in cluster.loss_report())
    pending = sum(row[4] for row in cluster.loss_report())
    check(lost == 0 and pending == 0, "no update is pending or permanently lost")


def _visible_younger_than_ttl(cluster: Cluster, node: str, kg: str) -> tuple[int, int]:
    """(visible records, records older than the TTL) at ``node``."""
    st = cluster.storages[node]
    kgn = as_keygroup(kg)
    ttl = st.ttl(kgn)
    now = cluster.now()
    visible = st.items(kgn, now)
    return len(visible), sum(1 for s in visible if ttl is not None and now - s.local_write_time > ttl)


# ---------------------------------------------------------------- research station


RESEARCH_STATION = """\
seed 1
timescale 86400
node station lat=-75.1 lon=123.3 machines=2
node cloud lat=50.1 lon=8.7 machines=2
node agg lat=50.1 lon=8.7
node uni lat=52.5 lon=13.4
client sensor aggregator researcher
keygroup station.readings replicas=station:2d,cloud:disabled triggers=agg clients=sensor
keygroup station.means replicas=cloud:disabled,uni:disabled clients=aggregator,researcher
faults delay=2ms..20ms reorder=0.05
scenario research-station readings=60 window=10 period=100ms
"""


def research_station(cluster: Cluster, params: dict) -> ScenarioReport:
    """Sensor readings buffered at the station, persisted in the cloud; a
    trigger-fed aggregator writes window means that fan out to a university."""
    report, check = _report("research-station", cluster)
    readings = _int(params, "readings", 60)
    window = _int(params, "window", 10)
    period = _dur(params, "period", "100ms")
    kg, means_kg = "station.readings", "station.means"
    stations = cluster.live("station")
    cloud = cluster.any_machine("cloud")

    arrived: list = []
    cluster.any_machine("agg").trigger_consume(kg, arrived.append)
    written_means: dict[str, bytes] = {}

    def aggregate(final: bool = False) -> None:
        while len(arrived) >= window * (len(written_means) + 1):
            j = len(written_means)
            chunk = arrived[j * window:(j + 1) * window]
            mean = sum(float(r.fields["temp"]) for r in chunk) / len(chunk)
            value = f"{mean:.3f}".encode()
            cloud.handle_put("aggregator", means_kg, f"mean-{j:03d}", {"mean": value})
            written_means[f"mean-{j:03d}"] = value

    t0 = cluster.now()
    for i in range(readings):
        cluster.run_until(t0 + i * period)
        temp = -20.0 + (i * 7 % 13) / 10
        stations[i % len(stations)].handle_put(
            "sensor", kg, f"r{i:04d}", {"temp": f"{temp:.1f}".encode()}
        )
        aggregate()
    cluster.settle()
    aggregate(final=True)
    cluster.settle()

    keys = [r.key for r in arrived]
    check(sorted(keys) == [f"r{i:04d}" for i in range(readings)],
          "aggregator received every reading exactly once")
    check(len(written_means) == readings // window, f"{readings // window} window means written")
    maps = cluster.replica_maps(means_kg)
    check(maps["uni"] == maps["cloud"] and len(maps["uni"]) == len(written_means),
          "university holds every aggregated record")
    check({k: r.fields["mean"] for k, r in maps["uni"].items()} == written_means,
          "university means equal the aggregator's output")
    check(len(cluster.replica_maps(kg)["cloud"]) == readings, "cloud persists every reading")
    visible, stale = _visible_younger_than_ttl(cluster, "station", kg)
    check(stale == 0, "station exposes no record older than its TTL")
    check(visible < readings, "station buffer dropped expired readings")
    _no_loss(cluster, check)
    report.facts.update({
        "readings": readings, "means": len(written_means), "station_visible": visible,
        "station_ttl_ms": cluster.storages["station"].ttl(as_keygroup(kg)),
    })
    return _finish(report, cluster)


# ---------------------------------------------------------------- carsharing


CARSHARING = """\
seed 2
timescale 3600
node vehicle lat=52.52 lon=13.40
node prep lat=52.52 lon=13.41
node buffer lat=52.50 lon=13.39 machines=2
node fleet lat=50.11 lon=8.68
client car preprocessor fleetmgr
keygroup car.telemetry replicas=vehicle:1h triggers=prep clients=car
keygroup fleet.uploads replicas=buffer:disabled triggers=fleet clients=preprocessor,fleetmgr
faults delay=1ms..10ms reorder=0.05
scenario carsharing readings=50 batch=5 period=50ms
"""


def carsharing(cluster: Cluster, params: dict) -> ScenarioReport:
    """Vehicle telemetry is preprocessed off a trigger stream; summaries are
    uploaded to a buffer replica whose trigger feeds fleet management."""
    report, check = _report("carsharing", cluster)
    readings = _int(params, "readings", 50)
    batch = _int(params, "batch", 5)
    period = _dur(params, "period", "50ms")
    kg, up_kg = "car.telemetry", "fleet.uploads"
    vehicle = cluster.any_machine("vehicle")
    buffers = cluster.live("buffer")

    telemetry: list = []
    uploads_seen: list = []
    cluster.any_machine("prep").trigger_consume(kg, telemetry.append)
    cluster.any_machine("fleet").trigger_consume(up_kg, uploads_seen.append)
    uploaded: list[str] = []

    def preprocess() -> None:
        while len(telemetry) >= batch * (len(uploaded) + 1):
            j = len(uploaded)
            chunk = telemetry[j * batch:(j + 1) * batch]
            speeds = [float(r.fields["speed"]) for r in chunk]
            key = f"upload-{j:03d}"
            buffers[j % len(buffers)].handle_put("preprocessor", up_kg, key, {
                "min": f"{min(speeds):.1f}".encode(),
                "max": f"{max(speeds):.1f}".encode(),
                "n": str(len(chunk)).encode(),
            })
            uploaded.append(key)

    rng = random.Random(cluster.spec.seed)
    t0 = cluster.now()
    for i in range(readings):
        cluster.run_until(t0 + i * period)
        vehicle.handle_put("car", kg, f"t{i:04d}", {"speed": f"{rng.uniform(0, 120):.1f}".encode()})
        preprocess()
    cluster.settle()
    preprocess()
    cluster.settle()

    check(sorted(r.key for r in telemetry) == [f"t{i:04d}" for i in range(readings)],
          "preprocessor received every telemetry update exactly once")
    check(len(uploaded) == readings // batch, f"{readings // batch} summaries uploaded")
    seen = [r.key for r in uploads_seen]
    check(sorted(seen) == sorted(uploaded) and len(seen) == len(set(seen)),
          "fleet management received every upload exactly once")
    check(sorted(cluster.replica_maps(up_kg)["buffer"]) == sorted(uploaded),
          "buffer replica holds every upload")
    visible, stale = _visible_younger_than_ttl(cluster, "vehicle", kg)
    check(stale == 0 and visible < readings, "vehicle keeps only telemetry younger than its TTL")
    _no_loss(cluster, check)
    report.facts.update({"telemetry": readings, "uploads": len(uploaded), "vehicle_visible": visible})
    return _finish(report, cluster)


# ---------------------------------------------------------------- mobile migration


MOBILE_MIGRATION = """\
seed 3
node tower1 lat=52.52 lon=13.40
node tower2 lat=52.50 lon=13.45
node cloud lat=50.11 lon=8.68 machines=2
client phone
keygroup phone.state replicas=tower1:disabled,cloud:disabled clients=phone
faults delay=1ms..10ms
scenario mobile-migration records=40 after=60
"""


def post_rotation_updates(cluster: Cluster, kg: str, min_version: int) -> list[UpdateMessage]:
    """Distinct update messages on ``kg`` sealed under ``min_version`` or later."""
    seen: dict[bytes, UpdateMessage] = {}
    for d in cluster.bus.trace:
        if d.kind != "pub" or d.topic != kg or d.payload in seen:
            continue
        msg = decode(d.payload)
        if isinstance(msg, UpdateMessage) and msg.secret_version >= min_version:
            seen[d.payload] = msg
    return list(seen.values())


def decrypt_rate(messages: list[UpdateMessage], keyring) -> float:
    ok = 0
    for msg in messages:
        try:
            open_record(decode(msg.payload, SealedRecord), keyring)
            ok += 1
        except (AuthenticationFailed, UnknownSecretVersion):
            pass
    return ok / len(messages) if messages else 0.0


def mobile_migration(cluster: Cluster, params: dict) -> ScenarioReport:
    """The phone's replica follows it from tower 1 to tower 2."""
    report, check = _report("mobile-migration", cluster)
    n_before = _int(params, "records", 40)
    n_after = _int(params, "after", 60)
    kg = "phone.state"
    at_tower1 = cluster.session("phone", "tower1")
    for i in range(n_before):
        at_tower1.put(kg, f"s{i:03d}", {"v": f"before-{i}".encode()})
        cluster.run_for(10)
    cluster.settle()
    before = cluster.replica_maps(kg)["tower1"]
    check(len(before) == n_before, "tower1 holds the phone's records before the move")

    meta0 = cluster.naming.keygroup(kg)
    old_ring = cluster.any_machine("tower1").keyring(kg)
    meta = on_movement(at_tower1, kg, "tower1", "tower2")
    cluster.sync_config()

    check(sorted(meta.replica_nodes) == ["cloud", "tower2"], "replicas are {tower2, cloud}")
    check(meta.secret.version == meta0.secret.version + 1, "exactly one secret rotation")
    tower2 = cluster.any_machine("tower2")
    check(all(tower2.handle_get("phone", kg, k) == r for k, r in before.items()),
          "tower2 serves every record previously on tower1")
    check(cluster.any_machine("tower1").cached(kg) is None, "tower1 dropped the keygroup configuration")

    at_tower2 = cluster.session("phone", "tower2")
    for i in range(n_after):
        at_tower2.put(kg, f"s{i % n_before:03d}", {"v": f"after-{i}".encode()})
        cluster.run_for(10)
    cluster.settle()
    post = post_rotation_updates(cluster, kg, meta.secret.version)
    check(len(post) >= min(50, n_after), f"observed {len(post)} post-rotation updates")
    check(decrypt_rate(post, old_ring) == 0.0,
          "tower1's old secret opens none of the post-rotation updates")
    for node in ("tower2", "cloud"):
        ring = cluster.any_machine(node).keyring(kg)
        check(decrypt_rate(post, ring) == 1.0, f"{node} opens every post-rotation update")
    check(not any(d.dst.startswith("tower1/") and d.topic == kg and d.payload in
                  {encode(m) for m in post} for d in cluster.bus.trace),
          "no post-rotation update was delivered to tower1")
    maps = cluster.replica_maps(kg)
    check(maps["tower2"] == maps["cloud"], "tower2 and cloud converge")
    _no_loss(cluster, check)
    report.facts.update({
        "secret_version_before": meta0.secret.version,
        "secret_version_after": meta.secret.version,
        "post_rotation_updates": len(post),
    })
    return _finish(report, cluster)


# ---------------------------------------------------------------- data loss hazard


DATA_LOSS = """\
seed 4
node edge lat=52.52 lon=13.40
node cloud lat=50.11 lon=8.68
client app
keygroup app.buffer replicas=edge:500ms,cloud:disabled clients=app
partition edge|cloud from=100ms to=1100ms
daemon buffer=8
scenario data-loss burst=30 spacing=20ms
"""


def data_loss(cluster: Cluster, params: dict) -> ScenarioReport:
    """Writes during an edge/cloud partition with a short edge TTL and a
    sender buffer smaller than the burst."""
    report, check = _report("data-loss", cluster)
    burst = _int(params, "burst", 30)
    spacing = _dur(params, "spacing", "20ms")
    kg = "app.buffer"
    edge = cluster.any_machine("edge")
    parts = cluster.bus.profile.partitions
    start = parts[0].start if parts else cluster.now()
    written = []
    for i in range(burst):
        cluster.run_until(start + 100 + i * spacing)
        key = f"b{i:03d}"
        edge.handle_put("app", kg, key, {"v": str(i).encode()})
        written.append(key)
    cluster.settle()
    maps = cluster.replica_maps(kg)
    lost_records = [k for k in written if all(k not in m for m in maps.values())]
    lost_counters = sum(row[5] for row in cluster.loss_report() if row[0] == "cloud")
    ttl = cluster.storages["edge"].ttl(as_keygroup(kg))
    report.facts.update({
        "edge_ttl_ms": "disabled" if ttl is None else ttl,
        "buffer": cluster.spec.daemon.buffer_capacity,
        "written": len(written),
        "lost_records": len(lost_records),
        "permanently_lost_counters": lost_counters,
    })
    check(sum(row[4] for row in cluster.loss_report()) == 0, "no gap is left pending")
    if ttl is not None:
        check(lost_counters > 0, "cloud reports permanently lost updates")
        check(len(lost_records) > 0, "expired edge records are absent everywhere")
    else:
        check(len(lost_records) == 0, "with TTL disabled no record is lost")
    return _finish(report, cluster)


# ---------------------------------------------------------------- convergence


CONVERGENCE = """\
seed 0
node r0
node r1
node r2
client app
keygroup app.conv replicas=r0,r1,r2 clients=app
faults drop=0.2 reorder=0.1 delay=1ms..5ms reorder-extra=30ms
partition r0|r2 from=3s to=5s
daemon buffer=64
scenario convergence ops=200 keys=20 spacing=50ms
"""


def convergence(cluster: Cluster, params: dict) -> ScenarioReport:
    """One writer, mixed puts and deletes under drops, reordering and a
    partition; all replicas must end byte-identical."""
    report, check = _report("convergence", cluster)
    ops = _int(params, "ops", 200)
    keys = _int(params, "keys", 20)
    spacing = _dur(params, "spacing", "50ms")
    meta = cluster.naming.keygroup(cluster.spec.keygroups[0].name)
    kg = str(meta.name)
    writer = cluster.any_machine(sorted(meta.replica_nodes)[0])
    rng = random.Random(cluster.spec.seed)
    t0 = cluster.now()
    for i in range(ops):
        cluster.run_until(t0 + i * spacing)
        key = f"k{rng.randrange(keys)}"
        if rng.random() < 0.3:
            writer.handle_delete("app", kg, key)
        else:
            writer.handle_put("app", kg, key, {"v": str(i).encode()})
    settled = cluster.settle()
    maps = cluster.replica_maps(kg)
    encoded = {node: encode(m) for node, m in maps.items()}
    report.facts.update({"ops": ops, "dropped": cluster.bus.dropped, "settled_at_ms": cluster.now()})
    check(settled, "replication quiesced")
    check(len(set(encoded.values())) == 1, "all replicas hold byte-identical record maps")
    _no_loss(cluster, check)
    return _finish(report, cluster)


# ---------------------------------------------------------------- staleness


STALENESS = """\
seed 5
node origin
node remote
client app
keygroup app.stale replicas=origin,remote clients=app
faults delay=20ms
scenario staleness ops=200
"""


def staleness(cluster: Cluster, params: dict) -> ScenarioReport:
    report, check = _report("staleness", cluster)
    kg = cluster.spec.keygroups[0].name
    table = measure_staleness(cluster, kg, _int(params, "ops", 200))
    report.tables.append(table)
    floor = cluster.spec.faults.delay_ms[0]
    for name, stats in table.columns.items():
        check(stats.min >= 0 and stats.min <= stats.avg <= stats.max, f"{name} statistics are ordered")
        check(stats.min >= floor, f"{name} staleness is at least the {floor:g} ms link delay")
    return _finish(report, cluster)


SCENARIOS: dict[str, tuple[Scenario, str]] = {
    "research-station": (research_station, RESEARCH_STATION),
    "carsharing": (carsharing, CARSHARING),
    "mobile-migration": (mobile_migration, MOBILE_MIGRATION),
    "data-loss": (data_loss, DATA_LOSS),
    "convergence": (convergence, CONVERGENCE),
    "staleness": (staleness, STALENESS),
}


def run_scenario(name: str, cluster: Cluster, params: dict | None = None) -> ScenarioReport:
    if name not in SCENARIOS:
        raise SpecInvalid(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    fn, _ = SCENARIOS[name]
    return fn(cluster, dict(cluster.spec.params if params is None else params))
