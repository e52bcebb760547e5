//! Space and time contract of the structured covariance operations, measured
//! with a counting allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;

use semig::linalg::SigmaOps;
use semig::Allocation;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static SERIAL: Mutex<()> = Mutex::new(());

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Peak bytes allocated above the starting level while `f` runs.
fn peak_extra<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let out = f();
    (out, PEAK.load(Ordering::SeqCst) - base)
}

const N: usize = 10_000;
const Q: usize = 4;

fn allocation(n: usize, k: usize) -> Allocation {
    Allocation::from_ids(&(0..n).map(|i| (i * 7919) % k).collect::<Vec<_>>()).unwrap()
}

fn vector(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.37).sin()).collect()
}

#[test]
fn applies_use_linear_extra_space() {
    let _g = SERIAL.lock().unwrap();
    let k = 50;
    let alloc = allocation(N, k);
    let v = vector(N);
    let x = DMatrix::from_fn(N, Q, |i, j| ((i + 3 * j) as f64 * 0.11).cos());
    let dense = 8 * N * N;
    // output plus per-cluster scratch, with slack for small headers
    let linear = 8 * (2 * N + 4 * k) + 4096;

    let (ops, bytes) = peak_extra(|| SigmaOps::new(&alloc));
    assert!(bytes <= 8 * 4 * k + 1024, "setup used {bytes} bytes");

    let (_, bytes) = peak_extra(|| ops.inv_apply(&v).unwrap());
    assert!(bytes <= linear, "inv_apply used {bytes} bytes");
    let (_, bytes) = peak_extra(|| ops.inv_sqrt_apply(&v).unwrap());
    assert!(bytes <= linear, "inv_sqrt_apply used {bytes} bytes");
    let (_, bytes) = peak_extra(|| ops.inv_inner(&v, &v).unwrap());
    assert!(bytes <= 8 * 4 * k + 1024, "inv_inner used {bytes} bytes");
    let (_, bytes) = peak_extra(|| ops.inv_cross(&x, &v).unwrap());
    assert!(bytes <= linear, "inv_cross used {bytes} bytes");
    let (_, bytes) = peak_extra(|| ops.inv_quadform(&x).unwrap());
    assert!(bytes <= 8 * (k * Q + Q * Q) + 1024, "inv_quadform used {bytes} bytes");
    let (_, bytes) = peak_extra(|| ops.log_det());
    assert_eq!(bytes, 0);
    assert!(linear * 100 < dense);
}

fn time_per_call(n: usize, reps: usize) -> f64 {
    let alloc = allocation(n, 50);
    let ops = SigmaOps::new(&alloc);
    let v = vector(n);
    let mut sink = 0.0;
    let start = Instant::now();
    for _ in 0..reps {
        sink += ops.inv_sqrt_apply(&v).unwrap()[n / 2];
        sink += ops.inv_inner(&v, &v).unwrap();
    }
    assert!(sink.is_finite());
    start.elapsed().as_secs_f64() / reps as f64
}

#[test]
fn apply_time_grows_linearly() {
    let _g = SERIAL.lock().unwrap();
    time_per_call(N, 20);
    let small = (0..3).map(|_| time_per_call(N, 200)).fold(f64::INFINITY, f64::min);
    let large = (0..3).map(|_| time_per_call(10 * N, 20)).fold(f64::INFINITY, f64::min);
    // linear cost gives a ratio near 10; anything quadratic would give 100
    assert!(large / small < 30.0, "time ratio {:.1}", large / small);
}
