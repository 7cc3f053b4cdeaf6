use sfb_core::envs::{
    bayes_oracle, cmnist_color, color_noise_for_correlation, gen_ac, gen_cedd, make_cmnist, suboptimality_vs_bayes,
    EnvDataset, GeneratorTag, MnistDigits, CMNIST_FEATURES, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};

fn gen(tag: GeneratorTag, beta: f64, n: usize, seed: u64) -> EnvDataset {
    match tag {
        GeneratorTag::Ac => gen_ac(beta, n, seed).unwrap(),
        _ => gen_cedd(beta, n, seed).unwrap(),
    }
}

#[test]
fn empirical_cells_match_enumeration() {
    let n = 1_000_000;
    for (tag, beta) in
        [(GeneratorTag::Ac, 0.1), (GeneratorTag::Ac, 0.7), (GeneratorTag::Cedd, 0.2), (GeneratorTag::Cedd, 0.95)]
    {
        let ds = gen(tag, beta, n, 42);
        let oracle = bayes_oracle(tag, beta).unwrap();
        for cell in &oracle.cells {
            let idx: Vec<usize> = (0..n).filter(|&i| ds.x.row(i) == [cell.x_s, cell.x_u]).collect();
            let freq = idx.len() as f64 / n as f64;
            let se_mass = (cell.mass * (1.0 - cell.mass) / n as f64).sqrt();
            assert!((freq - cell.mass).abs() <= 3.0 * se_mass + 1e-12, "{tag:?} {beta} mass {freq} vs {}", cell.mass);
            if idx.is_empty() {
                continue;
            }
            let p = idx.iter().filter(|&&i| ds.labels[i] == 1).count() as f64 / idx.len() as f64;
            let se = (cell.p_given_su * (1.0 - cell.p_given_su) / idx.len() as f64).sqrt();
            assert!(
                (p - cell.p_given_su).abs() <= 3.0 * se + 1e-12,
                "{tag:?} {beta} posterior {p} vs {}",
                cell.p_given_su
            );
        }
    }
}

#[test]
fn distinct_seeds_give_distinct_streams() {
    let a = gen_ac(0.7, 500, 1).unwrap();
    let b = gen_ac(0.7, 500, 2).unwrap();
    assert_ne!(a.x, b.x);
    assert_eq!(a, gen_ac(0.7, 500, 1).unwrap());
}

#[test]
fn constant_classifier_suboptimality() {
    let oracle = bayes_oracle(GeneratorTag::Ac, 0.1).unwrap();
    // Bayes label from x_U at beta = 0.1 is the opposite sign of x_U, so the
    // constant 1 is wrong exactly on x_U = +1.
    let wrong_mass: f64 = oracle.cells.iter().filter(|c| c.x_u == 1.0).map(|c| c.mass).sum();
    let s = suboptimality_vs_bayes(|_| 1, &oracle).unwrap();
    assert!((s - wrong_mass).abs() < 1e-15);
    let bayes = suboptimality_vs_bayes(|x_u| oracle.bayes_label_u(x_u).unwrap(), &oracle).unwrap();
    assert_eq!(bayes, 0.0);
}

/// IDX files whose 28x28 images encode the digit as a filled block.
fn fake_mnist(n: usize) -> MnistDigits {
    let mut images = Vec::new();
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [n as u32, 28, 28] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    let mut labels = Vec::new();
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let digit = (i * 7 % 10) as u8;
        let mut img = vec![0u8; 28 * 28];
        for r in 0..28 {
            for c in 0..(2 + 2 * digit as usize) {
                img[r * 28 + c] = 200;
            }
        }
        images.extend(img);
        labels.push(digit);
    }
    MnistDigits::parse(&images, &labels).unwrap()
}

#[test]
fn cmnist_without_noise_colors_by_label() {
    let digits = fake_mnist(400);
    let envs = make_cmnist(&digits, &[0.0, 0.0], 0.0, 3).unwrap();
    for env in &envs {
        assert_eq!(env.x.cols(), CMNIST_FEATURES);
        for i in 0..env.len() {
            assert_eq!(cmnist_color(env.x.row(i)), env.labels[i]);
        }
    }
    assert_eq!(envs[0].len() + envs[1].len(), 400);
}

#[test]
fn cmnist_noise_rates() {
    let digits = fake_mnist(40_000);
    let envs = make_cmnist(&digits, &[0.1, 0.2], 0.25, 9).unwrap();
    for (env, e) in envs.iter().zip([0.1, 0.2]) {
        let agree = (0..env.len()).filter(|&i| cmnist_color(env.x.row(i)) == env.labels[i]).count() as f64;
        assert!((agree / env.len() as f64 - (1.0 - e)).abs() < 0.01);
    }
    // Shuffled dealing keeps each digit with its own label: the block width
    // in the image still identifies the digit.
    let env = &envs[0];
    let plane = 14 * 14;
    let mut clean = 0;
    for i in 0..env.len() {
        let row = env.x.row(i);
        let ch = cmnist_color(row);
        let width = row[ch * plane..ch * plane + 14].iter().filter(|v| **v > 0.0).count();
        let digit = width - 1;
        clean += usize::from(usize::from(digit >= 5) == env.labels[i]);
    }
    assert!((clean as f64 / env.len() as f64 - 0.75).abs() < 0.01);
}

#[test]
fn correlation_map_reproduces_correlation() {
    let digits = fake_mnist(40_000);
    for c in [1.0, 0.5, 0.0, -0.4, -1.0] {
        let e = color_noise_for_correlation(c);
        let env = &make_cmnist(&digits, &[e], 0.25, 1).unwrap()[0];
        let n = env.len() as f64;
        let sign = |b: usize| if b == 1 { 1.0 } else { -1.0 };
        let (mut sc, mut sy, mut scy, mut sc2, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..env.len() {
            let (a, b) = (sign(cmnist_color(env.x.row(i))), sign(env.labels[i]));
            sc += a;
            sy += b;
            scy += a * b;
            sc2 += a * a;
            sy2 += b * b;
        }
        let cov = scy / n - sc / n * sy / n;
        let corr = cov / ((sc2 / n - (sc / n).powi(2)) * (sy2 / n - (sy / n).powi(2))).sqrt();
        assert!((corr - c).abs() <= 0.01, "c {c}: empirical {corr}");
    }
}
