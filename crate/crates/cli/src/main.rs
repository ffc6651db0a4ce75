fn main() {
    println!("fuse3d");
}
