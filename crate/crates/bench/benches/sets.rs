use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use freeaccess::harness::{Mix, OpKind, Workload};
use freeaccess::{
    Access, Arena, EbrAccess, EbrDomain, FaAccess, HpAccess, HpDomain, Label, ListSet, NoReclaim, NodeLayout,
    NrAccess, OpSpec, Runtime, RuntimeConfig, Variant, LOCALS,
};

const RANGE: u64 = 1024;
const BATCH: u64 = 1000;

fn fill<A: Access>(set: &ListSet, acc: &mut A) {
    for k in (0..RANGE as i64).step_by(2) {
        set.insert(acc, k).unwrap();
    }
}

fn run_batch<A: Access>(set: &ListSet, acc: &mut A, w: &mut Workload) {
    for _ in 0..BATCH {
        let (op, k) = w.next_op();
        let r = match op {
            OpKind::Contains => set.contains(acc, k),
            OpKind::Insert => set.insert(acc, k),
            OpKind::Remove => set.remove(acc, k),
        };
        black_box(r.unwrap());
    }
}

fn list_ops(c: &mut Criterion) {
    let mut g = c.benchmark_group("list_1k_50c");
    g.throughput(Throughput::Elements(BATCH));
    let mix = Mix::new(50, 25, 25);

    for v in Variant::ALL {
        let rt = Runtime::new(RuntimeConfig { max_threads: 1, ..Default::default() }).unwrap();
        let arena = rt.add_arena(4096, NodeLayout::list_node()).unwrap();
        let mut acc = FaAccess::new(rt.register().unwrap(), arena.clone());
        let set = ListSet::new(arena, v).unwrap();
        fill(&set, &mut acc);
        let mut w = Workload::new(1, 0, mix, RANGE);
        g.bench_function(BenchmarkId::new("fa", v), |b| b.iter(|| run_batch(&set, &mut acc, &mut w)));
    }

    let arena = Arc::new(Arena::new(200_000, NodeLayout::list_node()).unwrap());
    let mut acc = HpAccess::new(HpDomain::new(1, 3, 512).unwrap().register(arena.clone()).unwrap());
    let set = ListSet::new(arena, Variant::Hm).unwrap();
    fill(&set, &mut acc);
    let mut w = Workload::new(1, 0, mix, RANGE);
    g.bench_function(BenchmarkId::new("hp", Variant::Hm), |b| b.iter(|| run_batch(&set, &mut acc, &mut w)));

    let arena = Arc::new(Arena::new(200_000, NodeLayout::list_node()).unwrap());
    let mut acc = EbrAccess::new(EbrDomain::new(1).unwrap().register(arena.clone()).unwrap());
    let set = ListSet::new(arena, Variant::Hm).unwrap();
    fill(&set, &mut acc);
    let mut w = Workload::new(1, 0, mix, RANGE);
    g.bench_function(BenchmarkId::new("ebr", Variant::Hm), |b| b.iter(|| run_batch(&set, &mut acc, &mut w)));

    // contains only, so the leaky pool never runs out
    let arena = Arc::new(Arena::new(4096, NodeLayout::list_node()).unwrap());
    let mut acc = NrAccess::new(NoReclaim::new(arena.clone()), 0);
    let set = ListSet::new(arena, Variant::Hhs).unwrap();
    fill(&set, &mut acc);
    let mut w = Workload::new(1, 0, Mix::new(100, 0, 0), RANGE);
    g.bench_function(BenchmarkId::new("nr_read_only", Variant::Hhs), |b| b.iter(|| run_batch(&set, &mut acc, &mut w)));
    g.finish();
}

fn runtime_primitives(c: &mut Criterion) {
    let rt = Runtime::new(RuntimeConfig { max_threads: 1, ..Default::default() }).unwrap();
    let arena = rt.add_arena(64, NodeLayout::list_node()).unwrap();
    let node = arena.pop_free(0).unwrap().raw();
    let spec = OpSpec::new(Label(0), 2).unwrap();
    let mut h = rt.register().unwrap();

    c.bench_function("op_begin_end", |b| {
        b.iter(|| {
            h.op_begin(&spec, &[], [0; LOCALS]).unwrap();
            h.op_end();
        })
    });
    c.bench_function("write_only_period", |b| {
        b.iter(|| {
            h.op_begin(&spec, &[], [0; LOCALS]).unwrap();
            h.begin_write_only(black_box(&[node, node])).unwrap();
            h.end_write_only(Label(1), [0; LOCALS]);
            h.op_end();
        })
    });
}

fn reclamation_phase(c: &mut Criterion) {
    let mut g = c.benchmark_group("reclamation_phase");
    for live in [100usize, 1000, 10_000] {
        let rt = Runtime::new(RuntimeConfig { max_threads: 1, ..Default::default() }).unwrap();
        let arena = rt.add_arena(live * 2 + 16, NodeLayout::list_node()).unwrap();
        let mut acc = FaAccess::new(rt.register().unwrap(), arena.clone());
        let set = ListSet::new(arena, Variant::Hhs).unwrap();
        for k in 0..live as i64 {
            set.insert(&mut acc, k).unwrap();
        }
        g.throughput(Throughput::Elements(live as u64));
        g.bench_with_input(BenchmarkId::from_parameter(live), &live, |b, _| b.iter(|| rt.reclamation_phase()));
    }
    g.finish();
}

criterion_group!(benches, list_ops, runtime_primitives, reclamation_phase);
criterion_main!(benches);
