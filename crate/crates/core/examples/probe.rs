use kakeya_core::generators::gen_direction_separated;
use kakeya_core::geom::Solid;
use kakeya_core::voxel::{rasterize_solid, GridScale};

fn main() {
    let k = 7;
    let scale = GridScale::new(k).unwrap();
    let fam = gen_direction_separated(k, 1).unwrap();
    println!("tubes: {}", fam.len());
    let mut empties = 0;
    for (i, t) in fam.tubes().iter().enumerate() {
        let v = rasterize_solid(scale, &Solid::Tube(t.clone())).unwrap();
        if v.count() == 0 {
            empties += 1;
            if empties <= 5 {
                println!(
                    "empty #{i}: anchor=({:.6},{:.6},{:.6}) dir=({:.6},{:.6},{:.6}) r={:.6e} len={}",
                    t.anchor().x, t.anchor().y, t.anchor().z,
                    t.dir().x, t.dir().y, t.dir().z,
                    t.radius(), t.length()
                );
            }
        }
    }
    println!("total empty: {empties}");
}
