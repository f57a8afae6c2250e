use copydet::globalsim::{self, GlobalEmbedding, Projection};
use copydet::imaging::{procedural_reference, to_grayscale};
use copydet::sift::{self, SiftParams};
use copydet::vecindex::{self, Dtype, IndexError, PartitionParams};

fn sets() -> Vec<sift::FeatureSet> {
    (0..4)
        .map(|i| {
            let g = to_grayscale(&procedural_reference(40 + i, 160, 140)).unwrap();
            sift::extract_with_id(&g, &SiftParams::default(), &format!("ref{i}")).unwrap()
        })
        .collect()
}

#[test]
fn truncated_files_are_rejected_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let sets = sets();

    let archive = tmp.path().join("a.sft");
    sift::write_archive(&archive, &sets).unwrap();
    let back = sift::read_archive(&archive).unwrap();
    assert_eq!(back.len(), sets.len());
    for (a, b) in sets.iter().zip(&back) {
        assert_eq!((&a.image_id, &a.descriptors), (&b.image_id, &b.descriptors));
        let public = |k: &sift::Keypoint| [k.x, k.y, k.scale, k.orientation, k.response];
        assert!(a.keypoints.iter().map(public).eq(b.keypoints.iter().map(public)));
    }
    let bytes = std::fs::read(&archive).unwrap();
    std::fs::write(&archive, &bytes[..bytes.len() - 7]).unwrap();
    assert!(sift::read_archive(&archive).is_err());

    let index = vecindex::build_partitioned(&sets, Dtype::F16, &PartitionParams::default()).unwrap();
    let path = tmp.path().join("i.ldx");
    vecindex::save(&index, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(vecindex::load(&path).is_err(), "cut at {cut}");
    }
    let mut extended = bytes.clone();
    extended.push(0);
    std::fs::write(&path, &extended).unwrap();
    assert!(vecindex::load(&path).is_err());
    let mut wrong_magic = bytes;
    wrong_magic[0] ^= 0xff;
    std::fs::write(&path, &wrong_magic).unwrap();
    assert!(matches!(vecindex::load(&path), Err(IndexError::BadMagic(_))));

    let embs: Vec<GlobalEmbedding> = (0..3)
        .map(|i| globalsim::embed(format!("e{i}"), &procedural_reference(i, 96, 96), &Projection::identity()).unwrap())
        .collect();
    let path = tmp.path().join("e.gem");
    globalsim::save_embeddings(&embs, &path).unwrap();
    assert_eq!(globalsim::load_embeddings(&path).unwrap(), embs);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(globalsim::load_embeddings(&path).is_err());

    let path = tmp.path().join("p.prj");
    globalsim::save_projection(&Projection::identity(), &path).unwrap();
    assert_eq!(globalsim::load_projection(&path).unwrap(), Projection::identity());
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(globalsim::load_projection(&path).is_err());
}

#[test]
fn reconstructed_feature_sets_match_extraction() {
    let sets = sets();
    let index = vecindex::build_flat(&sets, Dtype::U8).unwrap();
    let back = index.feature_sets();
    assert_eq!(back.len(), sets.len());
    for (a, b) in sets.iter().zip(&back) {
        assert_eq!(a.image_id, b.image_id);
        assert_eq!(a.descriptors, b.descriptors);
    }
}
