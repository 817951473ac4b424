//! Write a tensor file, read its header back, and show that a corrupted file is rejected.

use tvproxy::store::{read_header, read_tensor, write_tensor, Tensor};

fn main() -> tvproxy::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("grid.tvpx");

    let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64 * 0.5).collect())?;
    write_tensor(&path, &t)?;
    let (header, size) = read_header(&path)?;
    println!("dims {:?}, version {}, dtype {}, {size} bytes", header.dims, header.version, header.dtype);
    assert_eq!(read_tensor(&path)?, t);

    // Chop the last value off.
    let bytes = std::fs::read(&path).expect("read back");
    std::fs::write(&path, &bytes[..bytes.len() - 8]).expect("rewrite");
    match read_tensor(&path) {
        Err(e) => println!("truncated file: {e}"),
        Ok(_) => unreachable!("truncation must be detected"),
    }
    Ok(())
}
