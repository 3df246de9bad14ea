//! Every graph operation against central finite differences.

use xdr_numerics::gradcheck::{op_suite, FdConfig};

#[test]
fn all_operations_match_finite_differences() {
    let reports = op_suite(&FdConfig::default());
    assert!(reports.len() >= 25);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| r.summary()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn every_tensor_gets_its_full_sample() {
    for r in op_suite(&FdConfig::default()) {
        assert!(r.coords >= r.tensors, "{}", r.summary());
    }
}
