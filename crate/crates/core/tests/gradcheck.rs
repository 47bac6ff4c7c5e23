use ignet::autograd::{CustomOp, Primitive};
use ignet::gradcheck::{self, max_rel_error, Group, TOLERANCE};
use ignet::{Result, Tape, Tensor, Var};

/// `x^2` with a backward rule scaled by `factor`.
struct Square {
    factor: f64,
}

impl CustomOp for Square {
    fn name(&self) -> &str {
        "square"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let g = inputs[0].zip_broadcast(grad, |x, g| self.factor * 2.0 * x * g)?;
        Ok(vec![g])
    }
}

fn square_error(factor: f64) -> f64 {
    let x = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.5]).unwrap();
    let mut f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
        let out = tape.value(v[0]).map(|a| a * a);
        let sq = tape.record(Primitive::Custom(Box::new(Square { factor })), &[v[0]], out)?;
        tape.sigmoid(sq)
    };
    max_rel_error(&[x], &mut f, 9).unwrap()
}

#[test]
fn correct_custom_backward_passes() {
    assert!(square_error(1.0) < TOLERANCE);
}

#[test]
fn corrupted_custom_backward_is_detected() {
    for factor in [1.01, 0.5, -1.0, 0.0] {
        let e = square_error(factor);
        assert!(e > TOLERANCE, "factor {factor} gave {e}");
    }
}

#[test]
fn scope_filtering() {
    let prims = gradcheck::run("primitives", 0).unwrap();
    assert!(!prims.is_empty() && prims.iter().all(|r| r.group == Group::Primitive));
    let se = gradcheck::run("se*", 0).unwrap();
    assert_eq!(se.len(), 4);
    assert!(se.iter().all(|r| r.name.starts_with("se") && r.passed()));
    let one = gradcheck::run("conv2d", 0).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].shapes, gradcheck::SHAPES_PER_CASE);
    assert!(gradcheck::run("nope", 0).is_err());
}
