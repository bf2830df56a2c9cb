//! Thread-local execution context: installed ledger, phase tag, shape-only
//! mode and whether kernels may fan out over rayon.
//!
//! Worker threads do not inherit thread-locals, so [`crate::parallel`]
//! captures the context on the calling thread and installs it in each task.

use std::cell::RefCell;
use std::sync::Arc;

use crate::ledger::Ledger;

#[derive(Debug, Clone)]
pub struct Context {
    ledger: Option<Arc<Ledger>>,
    shape_only: bool,
    parallel: bool,
    phase: &'static str,
}

impl Default for Context {
    fn default() -> Self {
        Self {
            ledger: None,
            shape_only: false,
            parallel: cfg!(feature = "parallel"),
            phase: "untagged",
        }
    }
}

thread_local! {
    static CONTEXT: RefCell<Context> = RefCell::new(Context::default());
}

pub fn capture() -> Context {
    CONTEXT.with(|ctx| ctx.borrow().clone())
}

/// Runs `f` with `ctx` installed, restoring the previous context afterwards.
pub fn with_context<R>(ctx: Context, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Context>);
    impl Drop for Restore {
        fn drop(&mut self) {
            if let Some(prev) = self.0.take() {
                CONTEXT.with(|c| *c.borrow_mut() = prev);
            }
        }
    }
    let previous = CONTEXT.with(|c| std::mem::replace(&mut *c.borrow_mut(), ctx));
    let _restore = Restore(Some(previous));
    f()
}

fn modified<R>(edit: impl FnOnce(&mut Context), f: impl FnOnce() -> R) -> R {
    let mut ctx = capture();
    edit(&mut ctx);
    with_context(ctx, f)
}

/// Installs `ledger` for the duration of `f`.
pub fn scope<R>(ledger: &Arc<Ledger>, f: impl FnOnce() -> R) -> R {
    modified(|c| c.ledger = Some(Arc::clone(ledger)), f)
}

/// Tags allocations made inside `f` with `name`.
pub fn phase<R>(name: &'static str, f: impl FnOnce() -> R) -> R {
    modified(|c| c.phase = name, f)
}

/// Runs `f` in shape-only mode: tensors are allocated and tracked, arithmetic
/// and data movement are skipped. Results are numerically meaningless.
pub fn shape_only<R>(f: impl FnOnce() -> R) -> R {
    modified(|c| c.shape_only = true, f)
}

/// Enables or disables rayon fan-out for `f`. Without the `parallel` feature
/// this is a no-op and everything runs sequentially.
pub fn with_parallelism<R>(parallel: bool, f: impl FnOnce() -> R) -> R {
    modified(|c| c.parallel = parallel && cfg!(feature = "parallel"), f)
}

/// Runs `f` untracked and with real arithmetic, whatever the caller's mode.
pub(crate) fn isolated<R>(f: impl FnOnce() -> R) -> R {
    modified(
        |c| {
            c.ledger = None;
            c.shape_only = false;
        },
        f,
    )
}

pub fn is_shape_only() -> bool {
    CONTEXT.with(|ctx| ctx.borrow().shape_only)
}

pub fn is_parallel() -> bool {
    CONTEXT.with(|ctx| ctx.borrow().parallel)
}

pub(crate) fn current_ledger() -> Option<(Arc<Ledger>, &'static str)> {
    CONTEXT.with(|ctx| {
        let ctx = ctx.borrow();
        ctx.ledger.as_ref().map(|l| (Arc::clone(l), ctx.phase))
    })
}
