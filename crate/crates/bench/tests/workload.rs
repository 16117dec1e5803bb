use mmsink_bench::{desk_workload, policies, trajectory};

#[test]
fn workload_is_deterministic() {
    let (m, p) = desk_workload(3);
    let a = trajectory(&m, &p, 40);
    let (m2, p2) = desk_workload(3);
    assert_eq!(a, trajectory(&m2, &p2, 40));
    assert_eq!(a.len(), p.len() + 40);
}

#[test]
fn policies_are_valid_for_desk_blocks() {
    for p in policies() {
        p.validate(8).unwrap();
    }
}
