import csv

from minerva.bench import STATS_COLUMNS
from minerva.cli import main
from minerva.synth import encode_rows, make_rows


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def test_put_and_query(tmp_path, capsys):
    state = str(tmp_path / "st")
    conf = tmp_path / "sim.conf"
    conf.write_text("net.peers = 4\nnet.latency.kind = constant\nnet.latency.value_ms = 5\n")
    rc, out, _ = run(capsys, "--state", state, "net", "--config", str(conf))
    assert rc == 0 and out.count("\n") >= 5

    table = tmp_path / "t.csv"
    table.write_bytes(encode_rows(make_rows(200, 0), "csv"))
    rc, out, err = run(capsys, "--state", state, "put", str(table), "--format", "csv",
                       "--fat", "--k", "4", "--chunk-size", "2048", "--placement", "random")
    cid = out.strip()
    assert rc == 0 and cid.startswith("b") and "fat tree" in err

    rc, out, err = run(capsys, "--state", state, "query",
                       f"select count(*) from ipfs.`/ipfs/{cid}#csv`")
    assert rc == 0 and out.splitlines()[-1].strip() == "200"
    assert "plan_ms=" in err and "dht_lookups=" in err

    rc, out, _ = run(capsys, "--state", state, "query",
                     f"create table ipfs.few as select id from ipfs.`/ipfs/{cid}#csv` where id < 3")
    assert rc == 0 and out.strip().startswith("b")
    rc, out, err = run(capsys, "--state", state, "query", "select * from ipfs.`few`")
    assert rc == 0 and "rows=3" in err


def test_errors_exit_nonzero(tmp_path, capsys):
    state = str(tmp_path / "st")
    rc, _, err = run(capsys, "--state", state, "query", "select from")
    assert rc == 1 and "error" in err
    rc, _, err = run(capsys, "--state", state, "query", "select * from ipfs.`nothing`")
    assert rc == 1 and "[plan]" in err
    rc, _, err = run(capsys, "--state", state, "put", str(tmp_path / "missing.csv"))
    assert rc == 2


def test_bench_writes_stats(tmp_path, capsys):
    out = tmp_path / "stats.csv"
    rc, stdout, _ = run(capsys, "bench", "cache_ablation", "--runs", "2", "--out", str(out))
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == STATS_COLUMNS
    assert len(rows) == 8 and "cache_ablation[both,run=1]" in stdout
