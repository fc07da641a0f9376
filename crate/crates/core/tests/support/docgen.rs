//! Random configuration documents for round-trip properties.

use std::collections::BTreeSet;

use proptest::prelude::*;
use stagehand_core::dsl::{Attribute, Block, Document, Expr, Item, Pos, Ref, StrPart};

fn ident() -> impl Strategy<Value = String> {
    "[A-Za-z_][A-Za-z0-9_-]{0,7}".prop_filter("keywords are not identifiers", |s| s != "true" && s != "false")
}

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            6 => proptest::char::range('a', 'z'),
            1 => Just(' '),
            1 => Just('"'),
            1 => Just('\\'),
            1 => Just('$'),
            1 => Just('{'),
            1 => Just('}'),
            1 => Just('\n'),
            1 => Just('\t'),
            1 => Just('é'),
            1 => Just('.'),
        ],
        0..12,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

fn reference() -> impl Strategy<Value = Ref> {
    proptest::collection::vec(ident(), 2..4).prop_map(|segs| Ref::new(segs).expect("valid segments"))
}

fn number() -> impl Strategy<Value = f64> {
    prop_oneof![
        (0u32..100_000).prop_map(f64::from),
        (0u32..10_000, 0u32..1000).prop_map(|(i, f)| f64::from(i) + f64::from(f) / 1000.0),
    ]
}

fn string_expr() -> impl Strategy<Value = Expr> {
    proptest::collection::vec(
        prop_oneof![3 => text().prop_map(StrPart::Lit), 1 => reference().prop_map(StrPart::Interp)],
        0..4,
    )
    .prop_map(Expr::string)
}

pub fn expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        string_expr(),
        number().prop_map(Expr::Num),
        any::<bool>().prop_map(Expr::Bool),
        reference().prop_map(Expr::Ref),
    ];
    leaf.prop_recursive(2, 12, 4, |inner| proptest::collection::vec(inner, 0..4).prop_map(Expr::List))
}

fn attributes() -> impl Strategy<Value = Vec<Item>> {
    proptest::collection::vec((ident(), expr()), 0..4).prop_map(|pairs| {
        let mut seen = BTreeSet::new();
        pairs
            .into_iter()
            .filter(|(n, _)| seen.insert(n.clone()))
            .map(|(name, value)| Item::Attribute(Attribute { name, value, pos: Pos::default() }))
            .collect()
    })
}

fn block_with(body: impl Strategy<Value = Vec<Item>>) -> impl Strategy<Value = Item> {
    (ident(), proptest::collection::vec(text(), 0..3), body).prop_map(|(keyword, labels, body)| {
        Item::Block(Block { keyword, labels, body, pos: Pos::default() })
    })
}

/// Interleaves attributes and blocks; attribute names stay unique per body.
fn body(depth: u32) -> BoxedStrategy<Vec<Item>> {
    if depth == 0 {
        return attributes().boxed();
    }
    (attributes(), proptest::collection::vec(block_with(body(depth - 1)), 0..3), any::<u64>())
        .prop_map(|(mut attrs, blocks, seed)| {
            for (i, b) in blocks.into_iter().enumerate() {
                let at = (seed as usize).wrapping_add(i * 7) % (attrs.len() + 1);
                attrs.insert(at, b);
            }
            attrs
        })
        .boxed()
}

pub fn document() -> impl Strategy<Value = Document> {
    body(2).prop_map(|items| Document { source_name: "gen.fl".into(), items })
}
