//! Property tests for the expression parser: the pretty-printed canonical
//! form must reparse to a function agreeing exactly (identical operation
//! order, hence bit-identical evaluation) on random points.

use fluctlab_core::expr::{parse_coefficient_expr, Ast, BinOp, CompiledExpr, Func};
use proptest::prelude::*;

fn arb_ast(depth: u32) -> BoxedStrategy<Ast> {
    let leaf = prop_oneof![
        (0.0_f64..100.0).prop_map(Ast::Num),
        (0usize..2).prop_map(Ast::Var),
    ];
    leaf.prop_recursive(depth, 64, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(|e| Ast::Neg(Box::new(e))),
            (inner.clone(), inner.clone(), 0u8..4).prop_map(|(a, b, op)| {
                let op = match op {
                    0 => BinOp::Add,
                    1 => BinOp::Sub,
                    2 => BinOp::Mul,
                    _ => BinOp::Div,
                };
                Ast::Bin(op, Box::new(a), Box::new(b))
            }),
            (inner.clone(), 0u8..5).prop_map(|(a, f)| {
                let f = match f {
                    0 => Func::Sin,
                    1 => Func::Cos,
                    2 => Func::Tanh,
                    3 => Func::Exp,
                    _ => Func::Abs,
                };
                Ast::Call(f, vec![a])
            }),
            (inner.clone(), inner, 0u8..2).prop_map(|(a, b, f)| {
                let f = if f == 0 { Func::Min } else { Func::Max };
                Ast::Call(f, vec![a, b])
            }),
        ]
    })
    .boxed()
}

fn compile(ast: &Ast) -> CompiledExpr {
    // Route through the printer: parse its own output.
    let vars = vec!["x".to_string(), "y".to_string()];
    let shim = CompiledExpr::from_ast(ast.clone(), vars.clone());
    parse_coefficient_expr(&shim.pretty(), &vars).expect("canonical form parses")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pretty_roundtrip_is_exact(ast in arb_ast(4), points in proptest::collection::vec((-10.0_f64..10.0, -10.0_f64..10.0), 100)) {
        let a = compile(&ast);
        let b = parse_coefficient_expr(&a.pretty(), &["x", "y"]).unwrap();
        for (x, y) in points {
            let va = a.eval(&[x, y]);
            let vb = b.eval(&[x, y]);
            prop_assert!(va == vb || (va.is_nan() && vb.is_nan()), "{va} vs {vb}");
        }
    }
}
