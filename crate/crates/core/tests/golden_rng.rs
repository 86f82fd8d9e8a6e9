use starfm_core::rng::RngState;

#[test]
fn seed_42_matches_the_frozen_stream() {
    let text = include_str!("golden/rng_seed42.txt");
    let mut rng = RngState::new(42);
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let v = rng.next_u64();
        assert_eq!(v, f[1].parse::<u64>().unwrap(), "draw {}", f[0]);
        assert_eq!((v >> 11) as f64 / (1u64 << 53) as f64, f[2].parse::<f64>().unwrap());
        rows += 1;
    }
    assert!(rows >= 3);
    let mut u = RngState::new(42);
    let first = u.next_uniform();
    assert_eq!(first, 0.5961188718302076);
}

#[test]
fn neighbouring_seeds_diverge_immediately() {
    let (mut a, mut b) = (RngState::new(1), RngState::new(2));
    let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
    assert_eq!(same, 0);
}

#[test]
fn streams_are_reproducible_and_distinct() {
    let draw = |s: &mut RngState| (0..8).map(|_| s.next_u64()).collect::<Vec<_>>();
    assert_eq!(draw(&mut RngState::stream(7, 3)), draw(&mut RngState::stream(7, 3)));
    assert_ne!(draw(&mut RngState::stream(7, 3)), draw(&mut RngState::stream(7, 4)));
}
