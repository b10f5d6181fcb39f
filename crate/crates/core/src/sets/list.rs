//! Sorted linked-list sets in three flavours.
//!
//! * [`Variant::Hhs`]: searches for updates unlink tagged nodes one at a
//!   time; `contains` is a wait-free walk that never writes.
//! * [`Variant::Hm`]: every operation (including `contains`) unlinks tagged
//!   nodes it meets; a failed unlink restarts the search from the head, and
//!   a remove whose own unlink fails runs one more search to clean up.
//! * [`Variant::Harris`]: a search skips whole runs of tagged nodes and
//!   removes each run with a single compare-and-swap.
//!
//! Every operation is written as a step function over [`Label`]s so it can
//! be re-entered after a restart. Reference variables are `[prev, cur, next,
//! node]`; locals are `[key, mode, ok, 0]`.

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use crate::arena::{Arena, NULL};
use crate::error::{Error, Result};
use crate::runtime::{Abort, Label};
use crate::sets::access::{Access, Scheme, KEY, NEXT};
use crate::tracer::{clear_tag, is_tagged, TAG};

pub const ENTRY: Label = Label(0);
pub const AFTER_SNIP: Label = Label(1);
pub const AFTER_LINK: Label = Label(2);
pub const AFTER_TAG: Label = Label(3);
pub const AFTER_UNLINK: Label = Label(4);

/// Every resume label used by the set operations.
pub const LABELS: [Label; 5] = [ENTRY, AFTER_SNIP, AFTER_LINK, AFTER_TAG, AFTER_UNLINK];

/// Parses a label name (`entry`, `after_snip`, ...) or number.
pub fn parse_label(s: &str) -> Option<Label> {
    let names = ["entry", "after_snip", "after_link", "after_tag", "after_unlink"];
    if let Some(i) = names.iter().position(|n| n.eq_ignore_ascii_case(s)) {
        return Some(LABELS[i]);
    }
    s.parse::<u16>().ok().filter(|&n| (n as usize) < LABELS.len()).map(Label)
}

const SEARCH: u64 = 0;
const CLEANUP: u64 = 1;

const HEAD_KEY: i64 = i64::MIN;
const TAIL_KEY: i64 = i64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Hhs,
    Hm,
    Harris,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Hhs, Variant::Hm, Variant::Harris];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Hhs => "hhs",
            Variant::Hm => "hm",
            Variant::Harris => "harris",
        }
    }

    /// Whether `scheme` can run this variant. Schemes that protect nodes
    /// one at a time need the variant that re-checks every link it follows.
    pub fn supports(self, scheme: Scheme) -> bool {
        self == Variant::Hm || matches!(scheme, Scheme::Fa | Scheme::Nr)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown list variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    Contains,
    Insert,
    Remove,
}

/// Result of a search: `cur` is the first untagged node with key >= the
/// target, `prev` links to it, `next` is its (untagged) successor.
#[derive(Debug, Clone, Copy)]
struct Found {
    prev: u64,
    cur: u64,
    next: u64,
    key: i64,
}

fn check_key(key: i64) -> Result<()> {
    if key == HEAD_KEY || key == TAIL_KEY {
        return Err(Error::Config(format!("key {key} is reserved for sentinels")));
    }
    Ok(())
}

fn check_scheme<A: Access>(variant: Variant) -> Result<()> {
    if !variant.supports(A::SCHEME) {
        return Err(Error::Config(format!(
            "the {variant} list cannot run under {}",
            A::SCHEME
        )));
    }
    Ok(())
}

pub(crate) fn run_op<A: Access>(acc: &mut A, variant: Variant, head: u64, op: Op, key: i64) -> Result<bool> {
    check_key(key)?;
    check_scheme::<A>(variant)?;
    let locals = [key as u64, SEARCH, 0, 0];
    if op == Op::Contains && variant == Variant::Hhs {
        return acc.run(ENTRY, locals, |acc, _| hhs_contains(acc, head, key));
    }
    acc.run(ENTRY, locals, |acc, label| step(acc, variant, head, op, key, label))
}

fn step<A: Access>(acc: &mut A, variant: Variant, head: u64, op: Op, key: i64, mut label: Label) -> Result<bool, Abort> {
    loop {
        label = match label {
            AFTER_SNIP => {
                let [prev, cur, next, node] = acc.resume_refs();
                let [_, mode, ok, _] = acc.resume_locals();
                let found = resume_search(acc, variant, head, key, mode, node, prev, cur, next, ok == 1)?;
                if mode == CLEANUP {
                    return Ok(true);
                }
                match after_search(acc, op, key, found)? {
                    Ok(done) => return Ok(done),
                    Err(next) => next,
                }
            }
            AFTER_LINK => {
                if acc.resume_locals()[2] == 1 {
                    return Ok(true);
                }
                ENTRY
            }
            AFTER_TAG => {
                if acc.resume_locals()[2] == 0 {
                    ENTRY
                } else {
                    let [prev, cur, next, _] = acc.resume_refs();
                    acc.begin_write([prev, cur, next, NULL])?;
                    let ok = acc.cas_next(prev, cur, next);
                    acc.end_write(AFTER_UNLINK, [key as u64, SEARCH, ok as u64, 0]);
                    AFTER_UNLINK
                }
            }
            AFTER_UNLINK => {
                if acc.resume_locals()[2] == 1 {
                    acc.retire(acc.resume_refs()[1]);
                } else if variant != Variant::Hhs {
                    search(acc, variant, head, key, CLEANUP, NULL)?;
                }
                return Ok(true);
            }
            _ => {
                let node = acc.resume_refs()[3];
                let found = search(acc, variant, head, key, SEARCH, node)?;
                match after_search(acc, op, key, found)? {
                    Ok(done) => return Ok(done),
                    Err(next) => next,
                }
            }
        };
    }
}

/// What an operation does once its search is over: either finish with a
/// result or move on to the label of the write-only period it just ended.
fn after_search<A: Access>(acc: &mut A, op: Op, key: i64, f: Found) -> Result<Result<bool, Label>, Abort> {
    match op {
        Op::Contains => Ok(Ok(f.key == key)),
        Op::Insert => {
            let node = acc.resume_refs()[3];
            if f.key == key {
                if node != NULL {
                    acc.release(node);
                }
                return Ok(Ok(false));
            }
            let node = if node == NULL { acc.alloc()? } else { node };
            acc.begin_write([f.prev, f.cur, NULL, node])?;
            acc.init_node(node, key, f.cur);
            let ok = acc.cas_next(f.prev, f.cur, node);
            acc.end_write(AFTER_LINK, [key as u64, SEARCH, ok as u64, 0]);
            Ok(Err(AFTER_LINK))
        }
        Op::Remove => {
            if f.key != key {
                return Ok(Ok(false));
            }
            acc.begin_write([f.prev, f.cur, f.next, NULL])?;
            let ok = acc.cas_next(f.cur, f.next, f.next | TAG);
            acc.end_write(AFTER_TAG, [key as u64, SEARCH, ok as u64, 0]);
            Ok(Err(AFTER_TAG))
        }
    }
}

fn search<A: Access>(acc: &mut A, variant: Variant, head: u64, key: i64, mode: u64, node: u64) -> Result<Found, Abort> {
    match variant {
        Variant::Harris => harris_search(acc, head, key, mode, node),
        _ => {
            let mut roles = [0, 1, 2];
            let cur = clear_tag(acc.read_next(head, roles[1])?);
            hm_search(acc, head, key, mode, node, head, cur, &mut roles)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn resume_search<A: Access>(
    acc: &mut A,
    variant: Variant,
    head: u64,
    key: i64,
    mode: u64,
    node: u64,
    prev: u64,
    cur: u64,
    next: u64,
    ok: bool,
) -> Result<Found, Abort> {
    match variant {
        Variant::Harris => {
            if ok {
                if let Some(f) = harris_confirm(acc, prev, cur)? {
                    return Ok(f);
                }
            }
            harris_search(acc, head, key, mode, node)
        }
        _ if ok => hm_search(acc, head, key, mode, node, prev, next, &mut [0, 1, 2]),
        _ => search(acc, variant, head, key, mode, node),
    }
}

/// Walks from `(prev, cur)`, unlinking tagged nodes one at a time. `roles`
/// names the hazard slots protecting prev, cur and next.
#[allow(clippy::too_many_arguments)]
fn hm_search<A: Access>(
    acc: &mut A,
    head: u64,
    key: i64,
    mode: u64,
    node: u64,
    mut prev: u64,
    mut cur: u64,
    roles: &mut [usize; 3],
) -> Result<Found, Abort> {
    loop {
        let (ckey, next) = acc.read_node(cur, roles[2])?;
        if !acc.still_linked(prev, cur) {
            prev = head;
            cur = clear_tag(acc.read_next(head, roles[1])?);
            continue;
        }
        if is_tagged(next) {
            let succ = clear_tag(next);
            acc.begin_write([prev, cur, succ, node])?;
            let ok = acc.cas_next(prev, cur, succ);
            acc.end_write(AFTER_SNIP, [key as u64, mode, ok as u64, 0]);
            if ok {
                acc.retire(cur);
                cur = succ;
                roles.swap(1, 2);
            } else {
                prev = head;
                cur = clear_tag(acc.read_next(head, roles[1])?);
            }
            continue;
        }
        if ckey >= key {
            return Ok(Found {
                prev,
                cur,
                next,
                key: ckey,
            });
        }
        prev = cur;
        cur = next;
        *roles = [roles[1], roles[2], roles[0]];
    }
}

/// Finds `left`, the last untagged node with key < `key`, and `right`, the
/// first untagged node after it, unlinking everything in between at once.
fn harris_search<A: Access>(acc: &mut A, head: u64, key: i64, mode: u64, node: u64) -> Result<Found, Abort> {
    loop {
        let mut t = head;
        let mut t_next = acc.read_next(head, 0)?;
        let mut left = head;
        let mut left_next = t_next;
        let right_key;
        loop {
            if !is_tagged(t_next) {
                left = t;
                left_next = t_next;
            }
            t = clear_tag(t_next);
            let (k, n) = acc.read_node(t, 0)?;
            t_next = n;
            if !is_tagged(n) && k >= key {
                right_key = k;
                break;
            }
        }
        let right = t;
        if left_next == right {
            return Ok(Found {
                prev: left,
                cur: right,
                next: t_next,
                key: right_key,
            });
        }
        acc.begin_write([left, right, left_next, node])?;
        let ok = acc.cas_next(left, left_next, right);
        acc.end_write(AFTER_SNIP, [key as u64, mode, ok as u64, 0]);
        if ok {
            if let Some(f) = harris_confirm(acc, left, right)? {
                return Ok(f);
            }
        }
    }
}

/// After a successful run unlink, `right` is usable unless it was tagged
/// in the meantime.
fn harris_confirm<A: Access>(acc: &mut A, left: u64, right: u64) -> Result<Option<Found>, Abort> {
    let (k, n) = acc.read_node(right, 0)?;
    Ok((!is_tagged(n)).then_some(Found {
        prev: left,
        cur: right,
        next: n,
        key: k,
    }))
}

/// Walks the list ignoring tags and writes nothing.
fn hhs_contains<A: Access>(acc: &mut A, head: u64, key: i64) -> Result<bool, Abort> {
    let mut cur = clear_tag(acc.read_next(head, 0)?);
    loop {
        let (k, n) = acc.read_node(cur, 0)?;
        if k >= key {
            return Ok(k == key && !is_tagged(n));
        }
        cur = clear_tag(n);
    }
}

/// A sorted set of `i64` keys between two sentinel nodes.
///
/// Keys `i64::MIN` and `i64::MAX` are reserved for the sentinels.
pub struct ListSet {
    variant: Variant,
    arena: Arc<Arena>,
    head: u64,
    root: Arc<AtomicU64>,
}

impl std::fmt::Debug for ListSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ListSet")
            .field("variant", &self.variant)
            .field("head", &format_args!("{:#x}", self.head))
            .finish_non_exhaustive()
    }
}

/// Allocates and links the sentinels of one list; `tail` is shared when
/// given. Returns (head, tail).
pub(crate) fn sentinels(arena: &Arena, tail: Option<u64>) -> Result<(u64, u64)> {
    let pop = || {
        arena.pop_free(0).map(|n| n.raw()).ok_or(Error::Exhausted {
            capacity: arena.capacity(),
        })
    };
    let tail = match tail {
        Some(t) => t,
        None => {
            let t = pop()?;
            write_node(arena, t, TAIL_KEY, NULL);
            t
        }
    };
    let head = pop()?;
    write_node(arena, head, HEAD_KEY, tail);
    Ok((head, tail))
}

fn write_node(arena: &Arena, node: u64, key: i64, next: u64) {
    use std::sync::atomic::Ordering::Release;
    arena.cell(node, KEY).expect("fresh node").store(key as u64, Release);
    arena.cell(node, NEXT).expect("fresh node").store(next, Release);
}

impl ListSet {
    /// Builds an empty list in `arena` and registers its head as a root.
    /// Call during setup, before other threads use the arena.
    pub fn new(arena: Arc<Arena>, variant: Variant) -> Result<Self> {
        let (head, _) = sentinels(&arena, None)?;
        let root = Arc::new(AtomicU64::new(head));
        arena.register_global_root(root.clone());
        Ok(Self {
            variant,
            arena,
            head,
            root,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    pub fn root(&self) -> &Arc<AtomicU64> {
        &self.root
    }

    pub fn contains<A: Access>(&self, acc: &mut A, key: i64) -> Result<bool> {
        run_op(acc, self.variant, self.head, Op::Contains, key)
    }

    pub fn insert<A: Access>(&self, acc: &mut A, key: i64) -> Result<bool> {
        run_op(acc, self.variant, self.head, Op::Insert, key)
    }

    pub fn remove<A: Access>(&self, acc: &mut A, key: i64) -> Result<bool> {
        run_op(acc, self.variant, self.head, Op::Remove, key)
    }

    /// Untagged keys in list order. Only meaningful at quiescence.
    pub fn keys(&self) -> Vec<i64> {
        walk(&self.arena, self.head).keys
    }

    /// Nodes reachable from the head, sentinels and tagged nodes included.
    /// Only meaningful at quiescence.
    pub fn reachable_nodes(&self) -> usize {
        walk(&self.arena, self.head).nodes + 1
    }

    /// Untagged keys strictly increase between the sentinels.
    pub fn is_sorted(&self) -> bool {
        self.keys().windows(2).all(|w| w[0] < w[1])
    }
}

pub(crate) struct Walk {
    pub keys: Vec<i64>,
    /// Nodes visited excluding the tail sentinel.
    pub nodes: usize,
}

/// Quiescent walk from a head sentinel. The tail is not counted so that
/// buckets sharing it can be summed.
pub(crate) fn walk(arena: &Arena, head: u64) -> Walk {
    use std::sync::atomic::Ordering::Acquire;
    let mut keys = Vec::new();
    let mut nodes = 1;
    let mut cur = clear_tag(arena.load(head, NEXT, Acquire));
    while let Some(cell) = arena.cell(cur, NEXT) {
        let next = cell.load(Acquire);
        let key = arena.load(cur, KEY, Acquire) as i64;
        if key == TAIL_KEY && next == NULL {
            return Walk { keys, nodes };
        }
        nodes += 1;
        if !is_tagged(next) {
            keys.push(key);
        }
        if nodes > arena.capacity() {
            break;
        }
        cur = clear_tag(next);
    }
    Walk { keys, nodes }
}
