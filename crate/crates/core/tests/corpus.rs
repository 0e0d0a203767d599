use wid::corpus::{unigram_tv, CorpusSpec, Generator};

#[test]
fn unigram_matches_stationary_distribution() {
    let g = Generator::new(CorpusSpec::new(512, 20_000, 32, 11)).unwrap();
    let c = g.generate().unwrap();
    let mut all = c.train.clone();
    all.extend(c.heldout.iter().cloned());
    let tv = unigram_tv(&all, &g.stationary_unigram());
    assert!(tv <= 0.05, "total variation {tv}");
}

#[test]
fn generation_is_deterministic_on_disk() {
    let spec = CorpusSpec::new(64, 300, 16, 4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Generator::new(spec.clone()).unwrap().generate().unwrap().write(a.path()).unwrap();
    Generator::new(spec).unwrap().generate().unwrap().write(b.path()).unwrap();
    for f in ["train.txt", "heldout.txt"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let back = wid::corpus::Corpus::read(a.path(), 64).unwrap();
    assert_eq!(back.train.len() + back.heldout.len(), 300);
}
