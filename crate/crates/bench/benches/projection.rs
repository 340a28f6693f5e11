use criterion::{criterion_group, criterion_main, Criterion};
use scg_breath::osp::{build_subspace, detect_ao, project};
use scg_breath::OspConfig;

fn projection(c: &mut Criterion) {
    let rec = scg_breath_bench::record();
    let taps = OspConfig::default().delay_taps();
    let subspace = build_subspace(&rec.ecg, &taps).unwrap();

    let mut g = c.benchmark_group("projection");
    g.sample_size(10);
    g.bench_function("build_subspace_40s_q120", |b| b.iter(|| build_subspace(&rec.ecg, &taps).unwrap()));
    g.bench_function("project_40s_q120", |b| b.iter(|| project(&rec.scg, &subspace).unwrap()));
    g.bench_function("detect_ao_40s", |b| b.iter(|| detect_ao(&rec, &OspConfig::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, projection);
criterion_main!(benches);
